"""Built-in micro corpus.

Twelve small C functions with harnesses and seed inputs, shipped as
package data so the whole pipeline can run end to end without any external
corpus.  Each function is annotated with whether the built-in comparison
mutant produces observably different side effects under the shipped seeds,
which is the ground truth the consistency checker is tested against.
"""

from __future__ import annotations

import shutil
from importlib import resources
from pathlib import Path

from .corpus import Manifest, load_manifest
from .errors import MissingFile


def packaged_fixture_root() -> Path:
    root = resources.files("decompeval") / "data" / "fixtures"
    path = Path(str(root))
    if not path.is_dir():
        raise MissingFile(f"packaged fixtures missing at {path}")
    return path


def generate_fixtures(out_dir) -> Path:
    """Copy the packaged corpus into ``out_dir`` and return the manifest
    path.  An existing copy is replaced wholesale."""
    out_dir = Path(out_dir)
    if out_dir.exists():
        shutil.rmtree(out_dir)
    shutil.copytree(packaged_fixture_root(), out_dir)
    return out_dir / "manifest.json"


def load_builtin_manifest() -> Manifest:
    """The packaged corpus, loaded in place (read-only use)."""
    return load_manifest(packaged_fixture_root() / "manifest.json")


def divergence_annotations(manifest: Manifest) -> dict:
    """symbol -> whether the comparison mutant diverges under the seeds
    (None means the target cannot be spliced and is out of scope)."""
    return {rec.symbol: rec.mutant_divergent for rec in manifest.functions}
