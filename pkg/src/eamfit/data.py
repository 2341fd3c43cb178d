"""Trial, subject, and dataset containers shared by the fitting,
simulation, and ingestion layers.

Covariates are stored per trial as a row of the subject's matrix; a
subject-level covariate is simply a column that is constant within the
subject. Attributes (condition labels, stimulus angles, ...) live in a
per-trial mapping consumed by the linking design.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Tuple

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class Trial:
    choice: int
    rt: float
    attrs: Mapping[str, object] = field(default_factory=dict)
    index: int = -1

    def __post_init__(self):
        if self.rt <= 0.0:
            raise ConfigError(f"trial {self.index}: rt must be positive, "
                              f"got {self.rt}")
        if self.choice < 0:
            raise ConfigError(f"trial {self.index}: choice must be a "
                              f"non-negative index")


@dataclass(frozen=True)
class SubjectData:
    subject: str
    trials: Tuple[Trial, ...]
    covariates: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "trials", tuple(self.trials))
        if self.covariates is not None:
            cov = np.atleast_2d(np.asarray(self.covariates, dtype=float))
            if cov.shape[0] != len(self.trials):
                raise ConfigError(
                    f"subject {self.subject}: covariate rows "
                    f"({cov.shape[0]}) do not match trials "
                    f"({len(self.trials)})")
            object.__setattr__(self, "covariates", cov)

    @property
    def n_trials(self) -> int:
        return len(self.trials)

    @property
    def min_rt(self) -> float:
        if not self.trials:
            raise ConfigError(f"subject {self.subject} has no trials, "
                              f"min_rt is undefined")
        return min(t.rt for t in self.trials)


@dataclass(frozen=True)
class Dataset:
    subjects: Tuple[SubjectData, ...]
    n_choices: int
    covariate_names: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "covariate_names",
                           tuple(self.covariate_names))
        if self.n_choices < 2:
            raise ConfigError("a choice model needs at least 2 outcomes")
        d = len(self.covariate_names)
        labels = set()
        for s in self.subjects:
            if s.subject in labels:
                raise ConfigError(f"duplicate subject label {s.subject!r}")
            labels.add(s.subject)
            have = 0 if s.covariates is None else s.covariates.shape[1]
            if have != d:
                raise ConfigError(
                    f"subject {s.subject}: {have} covariate columns, "
                    f"dataset declares {d}")
            for t in s.trials:
                if t.choice >= self.n_choices:
                    raise ConfigError(
                        f"subject {s.subject} trial {t.index}: choice "
                        f"{t.choice} out of range for {self.n_choices} "
                        f"outcomes")

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    @property
    def n_trials(self) -> int:
        return sum(s.n_trials for s in self.subjects)
