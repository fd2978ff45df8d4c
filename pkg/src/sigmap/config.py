"""Run configuration: one documented key=value file pins every tunable.

Every constant the pipeline depends on (kernel widths, match threshold,
window sizes, prototype means, CP rank, classifier subspace rank, family
specs) lives here so a single config file plus a master seed reproduces a
whole experiment. Serialization round-trips losslessly; the canonical text
is hashed into model files so stale models are detectable.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, replace

from .corpus import DEFAULT_ENTROPY_THRESHOLD, FamilySpec, default_specs
from .hierarchy import DescriptorConfig, Prototype, default_prototypes


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    master_seed: int = 1337
    families: tuple[FamilySpec, ...] = field(default_factory=lambda: tuple(default_specs()))
    entropy_threshold: float = DEFAULT_ENTROPY_THRESHOLD
    # extraction
    sigma: float | None = None  # None: per-reference default 0.35 * sqrt(length)
    threshold: float = 0.9
    window: int = 8
    # hierarchy
    n_max: int = 4
    cp_rank: int = 3
    cp_max_sweeps: int = 200
    cp_tol: float = 1e-8
    descriptor_seed: int = 0x5EED
    prototypes: tuple[Prototype, ...] = field(default_factory=default_prototypes)
    # classifier
    subspace_rank: int = 2
    epsilon: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError("threshold must be in (0, 1]")
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError("sigma must be positive (or omitted)")
        if self.window < 2:
            raise ConfigError("window must be at least 2")
        if self.n_max < 1:
            raise ConfigError("n_max must be at least 1")
        if self.cp_rank < 1:
            raise ConfigError("cp_rank must be at least 1")
        if self.subspace_rank < 0:
            raise ConfigError("subspace_rank must be non-negative")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not 0.0 <= self.entropy_threshold <= 8.0:
            raise ConfigError("entropy_threshold must be in [0, 8]")

    def descriptor_config(self) -> DescriptorConfig:
        return DescriptorConfig(
            prototypes=self.prototypes,
            window=self.window,
            n_max=self.n_max,
            cp_rank=self.cp_rank,
            cp_max_sweeps=self.cp_max_sweeps,
            cp_tol=self.cp_tol,
            seed=self.descriptor_seed,
        )

    def with_obfuscation(self, level: int) -> "RunConfig":
        return replace(
            self,
            families=tuple(replace(s, obfuscation_level=level) for s in self.families),
        )

    def with_seed(self, master_seed: int) -> "RunConfig":
        return replace(self, master_seed=master_seed)

    def to_text(self) -> str:
        families = "\n" + "\n".join(
            f"{s.name} {s.sample_count} {s.rounds_per_block} {s.obfuscation_level}"
            for s in self.families
        )
        prototypes = "\n" + "\n".join(
            f"{p.prototype_id} " + " ".join(repr(v) for v in p.mu) + f" {p.sigma!r}"
            for p in self.prototypes
        )
        parser = configparser.ConfigParser()
        parser["corpus"] = {
            "master_seed": str(self.master_seed),
            "entropy_threshold": repr(self.entropy_threshold),
            "families": families,
        }
        parser["extraction"] = {
            "sigma": "auto" if self.sigma is None else repr(self.sigma),
            "threshold": repr(self.threshold),
            "window": str(self.window),
        }
        parser["hierarchy"] = {
            "n_max": str(self.n_max),
            "cp_rank": str(self.cp_rank),
            "cp_max_sweeps": str(self.cp_max_sweeps),
            "cp_tol": repr(self.cp_tol),
            "descriptor_seed": str(self.descriptor_seed),
            "prototypes": prototypes,
        }
        parser["classifier"] = {
            "subspace_rank": str(self.subspace_rank),
            "epsilon": repr(self.epsilon),
        }
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser()
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unparseable config: {exc}") from exc
        try:
            corpus = parser["corpus"]
            extraction = parser["extraction"]
            hierarchy = parser["hierarchy"]
            classifier = parser["classifier"]

            families = []
            for line in corpus["families"].strip().splitlines():
                name, count, rounds, obf = line.split()
                families.append(FamilySpec(name, int(count), int(rounds), int(obf)))

            prototypes = []
            for line in hierarchy["prototypes"].strip().splitlines():
                parts = line.split()
                prototypes.append(Prototype(
                    parts[0], tuple(float(v) for v in parts[1:7]), float(parts[7])
                ))

            sigma_raw = extraction["sigma"]
            return cls(
                master_seed=int(corpus["master_seed"]),
                families=tuple(families),
                entropy_threshold=float(corpus["entropy_threshold"]),
                sigma=None if sigma_raw == "auto" else float(sigma_raw),
                threshold=float(extraction["threshold"]),
                window=int(extraction["window"]),
                n_max=int(hierarchy["n_max"]),
                cp_rank=int(hierarchy["cp_rank"]),
                cp_max_sweeps=int(hierarchy["cp_max_sweeps"]),
                cp_tol=float(hierarchy["cp_tol"]),
                descriptor_seed=int(hierarchy["descriptor_seed"]),
                prototypes=tuple(prototypes),
                subspace_rank=int(classifier["subspace_rank"]),
                epsilon=float(classifier["epsilon"]),
            )
        except (KeyError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad config value: {exc}") from exc

    def save(self, path) -> None:
        from pathlib import Path
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "RunConfig":
        from pathlib import Path
        return cls.from_text(Path(path).read_text())
