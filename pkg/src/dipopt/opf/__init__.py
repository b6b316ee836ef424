"""AC optimal power flow frontend."""
from .case import (OpfCase, TieLine, builtin_case, builtin_ties, format_matpower_case,
                   interconnect_copies, load_case, load_ties, parse_matpower_case)
from .model import (OpfRegionEvaluator, RegionPartition, build_admittance, build_opf_nlp,
                    flat_start, partition_opf)
