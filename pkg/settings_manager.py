import json
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)


class ConicSettings(BaseModel):
    """Operator-splitting conic solver parameters."""
    model_config = ConfigDict(frozen=True)

    eps: float = Field(1e-7, gt=0)
    eps_infeas: float = Field(1e-6, gt=0)
    max_iter: int = Field(200000, ge=1)
    rho: float = Field(0.1, gt=0)
    sigma: float = Field(1e-6, gt=0)
    alpha: float = Field(1.6, gt=0, lt=2)
    scaling_iters: int = Field(10, ge=0)
    adaptive_interval: int = Field(25, ge=1)
    check_interval: int = Field(10, ge=1)


class QpSettings(BaseModel):
    """Interior-point QP solver parameters."""
    model_config = ConfigDict(frozen=True)

    tol: float = Field(1e-8, gt=0)
    max_iter: int = Field(200, ge=1)
    prox: float = Field(1e-12, ge=0)


class Branching(str, Enum):
    MOST_FRACTIONAL = "most_fractional"


class NodeOrder(str, Enum):
    BEST_BOUND = "best_bound"


class SolveSettings(BaseModel):
    """Branch-and-bound parameters. rel_gap 1e-4 is the 0.01% termination gap."""
    model_config = ConfigDict(frozen=True)

    rel_gap: float = Field(1e-4, gt=0)
    time_limit: Optional[float] = Field(None, gt=0)
    node_limit: Optional[int] = Field(None, ge=1)
    branching: Branching = Branching.MOST_FRACTIONAL
    node_order: NodeOrder = NodeOrder.BEST_BOUND
    threads: int = Field(1, ge=1)
    deterministic: bool = True
    int_tol: float = Field(1e-6, gt=0)
    cut_tol: float = Field(1e-6, gt=0)
    cut_ytol: float = Field(1e-9, gt=0)
    max_cut_rounds: Optional[int] = Field(None, ge=1)
    qp: QpSettings = QpSettings()

    @property
    def workers(self) -> int:
        return 1 if self.deterministic else self.threads


# settings where null means "no limit"
NULLABLE_SETTINGS = frozenset({"time_limit", "node_limit", "max_cut_rounds"})


class SettingsManager:
    """
    Owns the default solver configuration, merges an optional JSON settings
    file and command-line overrides, and hands out typed settings objects.
    """
    def __init__(self, settings_path: Optional[str] = None):
        self.settings = self.get_default_settings()
        if settings_path:
            self.load_file(settings_path)

    def get_default_settings(self) -> Dict[str, Any]:
        """Define default configuration."""
        return {
            # Conic solver
            "conic_eps": 1e-7,
            "conic_max_iter": 200000,
            "conic_rho": 0.1,

            # Interior-point QP
            "qp_tol": 1e-8,
            "qp_max_iter": 200,

            # Branch-and-bound
            "rel_gap": 1e-4,
            "time_limit": None,
            "node_limit": None,
            "threads": 1,
            "deterministic": True,
            "int_tol": 1e-6,
            "cut_tol": 1e-6,
            "cut_ytol": 1e-9,
            "max_cut_rounds": None,

            # Reformulation
            "rho_method": "sdp_l",
        }

    def load_file(self, path: str):
        """
        Merge a JSON settings file; unknown keys are rejected. An explicit null
        resets a limit to unlimited.
        """
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(data, dict):
            raise ValueError(f"settings file {path} must hold a JSON object")
        for key, value in data.items():
            self.update_setting(key, value)
        logger.info(f"Loaded settings from {path}")

    def get_all_settings(self) -> Dict[str, Any]:
        return dict(self.settings)

    def get_setting(self, key: str) -> Any:
        return self.settings.get(key)

    def update_setting(self, key: str, value: Any):
        if key not in self.settings:
            raise KeyError(f"unknown setting '{key}'")
        if value is None and key not in NULLABLE_SETTINGS:
            raise ValueError(f"setting '{key}' cannot be null")
        self.settings[key] = value

    def update_settings(self, settings: Dict[str, Any]):
        """Bulk update; None values leave the current setting untouched."""
        for key, value in settings.items():
            if value is not None:
                self.update_setting(key, value)

    def reset_to_defaults(self):
        self.settings = self.get_default_settings()

    def conic_settings(self) -> ConicSettings:
        s = self.settings
        return ConicSettings(eps=s["conic_eps"], max_iter=s["conic_max_iter"], rho=s["conic_rho"])

    def qp_settings(self) -> QpSettings:
        s = self.settings
        return QpSettings(tol=s["qp_tol"], max_iter=s["qp_max_iter"])

    def solve_settings(self) -> SolveSettings:
        s = self.settings
        return SolveSettings(
            rel_gap=s["rel_gap"],
            time_limit=s["time_limit"],
            node_limit=s["node_limit"],
            threads=s["threads"],
            deterministic=s["deterministic"],
            int_tol=s["int_tol"],
            cut_tol=s["cut_tol"],
            cut_ytol=s["cut_ytol"],
            max_cut_rounds=s["max_cut_rounds"],
            qp=self.qp_settings(),
        )
