"""Per-sample extraction pipeline with optional multiprocess fan-out.

Results are merged in manifest order whatever the worker count, so artifacts
downstream are identical for any --jobs value.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import RunConfig
from .extraction import SignatureProfile, extract_profile
from .fingerprints import default_references
from .hierarchy import HierarchicalDescriptor, build_descriptor
from .sxe import BinaryImage, SxeError, parse_sxe


class SampleParseError(Exception):
    def __init__(self, path: str, cause: SxeError):
        super().__init__(f"{path}: {cause}")
        self.path = path
        self.cause = cause


def load_image(path) -> BinaryImage:
    try:
        return parse_sxe(Path(path).read_bytes())
    except SxeError as exc:
        raise SampleParseError(str(path), exc) from exc


def profile_image(image: BinaryImage, config: RunConfig) -> SignatureProfile:
    return extract_profile(
        image,
        default_references(),
        sigma=config.sigma,
        threshold=config.threshold,
        window=config.window,
    )


def descriptor_for_image(image: BinaryImage, config: RunConfig) -> HierarchicalDescriptor:
    profile = profile_image(image, config)
    return build_descriptor(image, profile, config.descriptor_config())


def _descriptor_task(args) -> HierarchicalDescriptor:
    path, config_text = args
    config = RunConfig.from_text(config_text)
    return descriptor_for_image(load_image(path), config)


def build_descriptors(
    paths: list,
    config: RunConfig,
    jobs: int = 1,
    on_result=None,
) -> list[HierarchicalDescriptor]:
    """Descriptor per path, in path order. ``on_result(index)`` fires as each
    result lands, which is how evaluation timing checkpoints are taken."""
    out: list[HierarchicalDescriptor] = []
    if jobs <= 1:
        for i, path in enumerate(paths):
            out.append(descriptor_for_image(load_image(path), config))
            if on_result:
                on_result(i)
        return out

    config_text = config.to_text()
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for i, desc in enumerate(pool.map(
            _descriptor_task, [(str(p), config_text) for p in paths], chunksize=8
        )):
            out.append(desc)
            if on_result:
                on_result(i)
    return out
