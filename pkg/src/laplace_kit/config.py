"""Run configuration shared by the CLI and the pipeline helpers.

Defaults follow the recommended recipe: last-layer KFAC of the GGN, prior
precision tuned post hoc on the Laplace evidence, probit predictive for
classification and the closed-form Gaussian predictive for regression.

Seeds: one top-level seed is split into named sub-seeds with
``numpy.random.SeedSequence(seed, spawn_key=(k,))`` where ``k`` is the index of
the name in :data:`SEED_NAMES`.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from laplace_kit import curvature as cv
from laplace_kit import posterior, predictive, tuning
from laplace_kit.errors import InvalidInput, UnsupportedCombination

SEED_ENV = "LAPLACE_KIT_SEED"
SEED_NAMES = ("init", "train", "sample", "data")


def sub_seed(seed, name):
    k = SEED_NAMES.index(name)
    return int(np.random.SeedSequence(int(seed), spawn_key=(k,)).generate_state(1)[0])


@dataclass
class RunConfig:
    task: str = "classification"
    hidden: list = field(default_factory=lambda: [32, 32])
    activation: str = "tanh"
    sigma_noise: float = 1.0
    prior_precision: float = 1.0
    # curvature
    kind: str = "ggn"
    structure: str = "kfac"
    subset: str = "last_layer"
    rank: Optional[int] = None
    subnetwork_size: Optional[int] = None
    kfac_prior_mode: str = "exact_eigen"
    # predictive
    pred_type: str = "glm"
    link: Optional[str] = None
    n_samples: int = 20
    # tuning
    tune: str = "posthoc"
    objective: str = "marglik"
    grid_points: int = 31
    grid_low: float = 1e-4
    grid_high: float = 1e4
    lambda_ood: float = 0.5
    # MAP training
    lr: float = 1e-2
    momentum: float = 0.9
    steps: int = 1000
    seed: int = 0
    ece_bins: int = 10

    def __post_init__(self):
        if self.link is None:
            self.link = "exact" if self.task == "regression" else "probit"

    @property
    def regression(self):
        return self.task == "regression"

    def validate(self):
        if self.task not in ("classification", "regression"):
            raise InvalidInput(f"unknown task {self.task!r}")
        if self.kind not in cv.KINDS:
            raise InvalidInput(f"unknown curvature kind {self.kind!r}")
        if self.structure not in cv.STRUCTURES:
            raise InvalidInput(f"unknown structure {self.structure!r}")
        if self.subset not in ("all", "last_layer", "subnetwork"):
            raise InvalidInput(f"unknown subset {self.subset!r}")
        if self.structure == "kfac" and self.subset == "subnetwork":
            raise UnsupportedCombination("kfac cannot be combined with a subnetwork subset")
        if self.structure == "lowrank" and not (self.rank and self.rank >= 1):
            raise InvalidInput("lowrank structure needs rank >= 1")
        if self.subset == "subnetwork" and not (self.subnetwork_size and self.subnetwork_size >= 1):
            raise InvalidInput("subnetwork subset needs subnetwork_size >= 1")
        if self.kfac_prior_mode not in posterior.KFAC_PRIOR_MODES:
            raise InvalidInput(f"unknown kfac prior mode {self.kfac_prior_mode!r}")
        if self.tune not in ("posthoc", "none"):
            raise InvalidInput(f"unknown tuning mode {self.tune!r}")
        if self.objective not in tuning.OBJECTIVES:
            raise InvalidInput(f"unknown objective {self.objective!r}")
        if not self.sigma_noise > 0 or not self.prior_precision > 0:
            raise InvalidInput("sigma_noise and prior_precision must be positive")
        if self.n_samples < 1 or self.steps < 0:
            raise InvalidInput("n_samples must be >= 1 and steps >= 0")
        predictive.validate_config(self.likelihood(), self.pred_type, self.link)
        return self

    def likelihood(self):
        from laplace_kit import nn

        if self.regression:
            return nn.GaussianRegression(self.sigma_noise)
        return nn.Categorical()

    def grid(self):
        return tuning.default_grid(self.grid_points, self.grid_low, self.grid_high)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path=None, overrides=None):
    """Defaults, then the seed env var, then ``overrides`` (CLI flags), then the JSON file."""
    values = {}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError as exc:
            raise InvalidInput(f"{SEED_ENV} must be an integer") from exc
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if path is not None:
        with open(path, encoding="utf-8") as f:
            try:
                values.update(json.load(f))
            except json.JSONDecodeError as exc:
                raise InvalidInput(f"{path}: {exc}") from exc
    return RunConfig.from_dict(values).validate()
