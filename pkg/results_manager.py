import logging
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from pydantic import BaseModel

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.17g"
NA = "NA"

COLUMNS = [
    "schema_version", "instance", "family", "n", "K", "dominance", "sections", "seed",
    "reform", "rho_method",
    "bound_plain", "bound_pr", "bound_lcr", "bound_qcr", "impr", "tau_sdp_l", "tau_sdp_a",
    "objective", "status", "nodes", "cuts", "gap",
    "time_sdp_l", "time_socp", "time_bnb", "time_total",
    "error",
]
TIME_COLUMNS = ["time_sdp_l", "time_socp", "time_bnb", "time_total"]
GROUP_COLUMNS = ["family", "n", "dominance", "K", "reform"]
AVERAGED_COLUMNS = [
    "bound_plain", "bound_pr", "bound_lcr", "bound_qcr", "impr",
    "objective", "nodes", "cuts", "gap", "time_sdp_l", "time_socp", "time_bnb", "time_total",
]


class RunRecord(BaseModel):
    """One benchmark row: an (instance, reformulation) pair."""
    instance: str
    reform: str
    family: Optional[str] = None
    n: Optional[int] = None
    K: Optional[int] = None
    dominance: Optional[str] = None
    sections: Optional[int] = None
    seed: Optional[int] = None
    rho_method: Optional[str] = None
    bound_plain: Optional[float] = None
    bound_pr: Optional[float] = None
    bound_lcr: Optional[float] = None
    bound_qcr: Optional[float] = None
    impr: Optional[float] = None
    tau_sdp_l: Optional[float] = None
    tau_sdp_a: Optional[float] = None
    objective: Optional[float] = None
    status: Optional[str] = None
    nodes: Optional[int] = None
    cuts: Optional[int] = None
    gap: Optional[float] = None
    time_sdp_l: Optional[float] = None
    time_socp: Optional[float] = None
    time_bnb: Optional[float] = None
    time_total: Optional[float] = None
    error: Optional[str] = None

    def to_row(self) -> Dict:
        row = self.model_dump()
        row["schema_version"] = SCHEMA_VERSION
        return row


class ResultsManager:
    """
    Collect benchmark rows and write them as a fixed-schema CSV, optionally
    with per-subset averages.
    """
    def __init__(self):
        self.records: List[RunRecord] = []

    def add(self, record: RunRecord):
        self.records.append(record)
        logger.debug(f"recorded {record.instance} / {record.reform}: {record.status}")

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self, include_timings: bool = True) -> pd.DataFrame:
        df = pd.DataFrame([r.to_row() for r in self.records], columns=COLUMNS)
        if not include_timings:
            df[TIME_COLUMNS] = None
        df = df.sort_values(["instance", "reform"], kind="mergesort").reset_index(drop=True)
        for col in ("n", "K", "sections", "seed", "nodes", "cuts"):
            df[col] = df[col].astype("Int64")
        return df

    def averages(self) -> pd.DataFrame:
        """Mean of the numeric columns per (family, n, dominance, K, reform) subset."""
        df = self.to_frame()
        if df.empty:
            return pd.DataFrame(columns=GROUP_COLUMNS + ["count"] + AVERAGED_COLUMNS)
        numeric = df[AVERAGED_COLUMNS].apply(pd.to_numeric, errors="coerce")
        keyed = pd.concat([df[GROUP_COLUMNS], numeric], axis=1)
        grouped = keyed.groupby(GROUP_COLUMNS, dropna=False, sort=True)
        out = grouped[AVERAGED_COLUMNS].mean()
        out.insert(0, "count", grouped.size())
        return out.reset_index()

    def write_csv(self, path, include_timings: bool = True) -> Path:
        path = Path(path)
        self.to_frame(include_timings).to_csv(path, index=False, na_rep=NA, float_format=FLOAT_FORMAT)
        logger.info(f"wrote {len(self.records)} rows to {path}")
        return path

    def write_averages(self, path) -> Path:
        path = Path(path)
        self.averages().to_csv(path, index=False, na_rep=NA, float_format=FLOAT_FORMAT)
        logger.info(f"wrote subset averages to {path}")
        return path
