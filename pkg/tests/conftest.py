import numpy as np
import pytest

from sigmap.config import RunConfig
from sigmap.corpus import FamilySpec, generate_corpus
from sigmap.pipeline import build_descriptors


def small_specs(obfuscation_level=0, per_family=4):
    return [
        FamilySpec(name, per_family, rounds_per_block=8, obfuscation_level=obfuscation_level)
        for name in ("locker_aes", "crypto_rsa", "hybrid_aes_rsa", "wiper_chacha", "benign")
    ]


@pytest.fixture(scope="session")
def run_config():
    return RunConfig()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 samples per family at obfuscation 0, shared across integration tests."""
    out = tmp_path_factory.mktemp("corpus_small")
    manifest = generate_corpus(small_specs(), master_seed=1137, out_dir=out)
    return out, manifest


@pytest.fixture(scope="session")
def small_descriptors(small_corpus, run_config):
    out, manifest = small_corpus
    paths = [out / e.path for e in manifest.entries]
    descriptors = build_descriptors(paths, run_config)
    labels = [e.family for e in manifest.entries]
    return descriptors, labels


@pytest.fixture(scope="session")
def small_matrix(small_descriptors):
    descriptors, labels = small_descriptors
    return np.stack([d.values for d in descriptors]), labels
