import os
import json
import hashlib
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, Optional, Tuple
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("ZTPS_LOG_FILE", "ztps.log")

# Optimizer defaults
DEFAULT_TOL = float(os.getenv("ZTPS_TOL", "1e-6"))
DEFAULT_REL_TOL = float(os.getenv("ZTPS_REL_TOL", "1e-10"))
DEFAULT_MAX_ITER = int(os.getenv("ZTPS_MAX_ITER", "500"))

DEFAULT_THREADS = int(os.getenv("ZTPS_THREADS", "1"))
DEFAULT_SEED = int(os.getenv("ZTPS_SEED", "0"))

SPLIT_FAMILIES = ("binomial", "betabinomial")
ZI_SIDES = ("none", "side1", "side2")
GLOBAL_FAMILIES = ("poisson", "negbin")


@dataclass
class FitConfig:
    """Controls for a full regression fit

    Args:
        tol: Convergence threshold on the gradient infinity norm
        rel_tol: Convergence threshold on the relative loglik change
        max_iter: Iteration cap per optimization
        families: Candidate split families tried at every node
        zi_sides: Candidate zero-inflation sides tried at every node
        global_family: "poisson", "negbin" or "auto" (AIC choice)
        global_zi: Zero-inflate the global abundance law
        regress_zi: Regress the zero-inflation probabilities on covariates
            instead of keeping them intercept-only
        threads: Worker threads for node-parallel fits
    """
    tol: float = DEFAULT_TOL
    rel_tol: float = DEFAULT_REL_TOL
    max_iter: int = DEFAULT_MAX_ITER
    families: Tuple[str, ...] = SPLIT_FAMILIES
    zi_sides: Tuple[str, ...] = ZI_SIDES
    global_family: str = "negbin"
    global_zi: bool = False
    regress_zi: bool = False
    threads: int = DEFAULT_THREADS

    def __post_init__(self):
        self.families = tuple(self.families)
        self.zi_sides = tuple(self.zi_sides)
        unknown = [f for f in self.families if f not in SPLIT_FAMILIES]
        if unknown or not self.families:
            raise ValueError(f"Unknown split families: {unknown}")
        unknown = [z for z in self.zi_sides if z not in ZI_SIDES]
        if unknown or not self.zi_sides:
            raise ValueError(f"Unknown zero-inflation sides: {unknown}")
        if self.global_family not in GLOBAL_FAMILIES + ("auto",):
            raise ValueError(f"Unknown global family: {self.global_family}")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")

    def optimizer_controls(self) -> Dict[str, Any]:
        return {"tol": self.tol, "rel_tol": self.rel_tol, "max_iter": self.max_iter}

    @classmethod
    def from_flags(cls, family: str = "auto", zi: str = "auto", **kwargs) -> "FitConfig":
        """Build a config from the CLI's --family / --zi switches"""
        families = SPLIT_FAMILIES if family == "auto" else (family,)
        zi_sides = ZI_SIDES if zi == "auto" else ("none",)
        return cls(families=families, zi_sides=zi_sides, **kwargs)


@dataclass
class RunConfig:
    """Everything a CLI command needs"""
    command: str
    counts: Optional[str] = None
    covariates: Optional[str] = None
    offsets: Optional[str] = None
    tree: Optional[str] = None
    folds: Optional[str] = None
    model: Optional[str] = None
    rows: Optional[str] = None
    out: str = "output"
    seed: int = DEFAULT_SEED
    n_sites: int = 400
    n_covariates: int = 2
    mean_total: float = 50.0
    coef_scale: float = 0.5
    zi_nodes: int = 0
    n_folds: int = 0
    n_species: int = 8
    fit: FitConfig = field(default_factory=FitConfig)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def fingerprint(self) -> str:
        """Short hash identifying the configuration; thread count and output
        directory are excluded since they never change results."""
        payload = self.to_dict()
        payload["fit"].pop("threads", None)
        payload.pop("out", None)
        canonical = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
