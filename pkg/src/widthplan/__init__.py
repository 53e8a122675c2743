"""Width-based planning: IW, Count-Based Rollout IW, hierarchical IW and
policy-guided replanning, plus the combinatorics of novel-state counts."""

from .hierarchy import HierarchicalIW, HierarchyConfig, hiw_search, ihiw
from .novelty import DepthNoveltyTable, FeatureSchema, NoveltyTable
from .search import SearchBudget, count_based_riw, iw_search, rollout_iw
from .widthmath import WidthParams, max_novel_closed, max_novel_recursive

__all__ = [
    "DepthNoveltyTable",
    "FeatureSchema",
    "HierarchicalIW",
    "HierarchyConfig",
    "NoveltyTable",
    "SearchBudget",
    "WidthParams",
    "count_based_riw",
    "hiw_search",
    "ihiw",
    "iw_search",
    "max_novel_closed",
    "max_novel_recursive",
    "rollout_iw",
]
__version__ = "0.1.0"
