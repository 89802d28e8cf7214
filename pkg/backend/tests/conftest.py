"""
Pytest configuration and shared fixtures.

This module provides:
- Synthetic scene catalogs and patch directories (see tests/fixtures/factories.py)
- Scripted adapters loaded from the golden workflow fixtures
- A small pipeline config whose candidate crops are cheap to build
"""

import pytest
import sys
import os
from pathlib import Path

# Add backend to path for imports
backend_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if backend_dir not in sys.path:
    sys.path.insert(0, backend_dir)

from adapters import AdapterScript, scripted_adapters
from imagedb import SceneDatabase
from pipeline_config import PipelineConfig
from tests.fixtures.factories import (
    FIXTURES_DIR, PATCH_META, build_catalog, load_fixture, write_patch,
)


# =============================================================================
# WORLD FIXTURES
# =============================================================================

@pytest.fixture
def catalog_dir(tmp_path) -> Path:
    """Catalog with one enlarge scene and four seasonal scenes around the patch grid."""
    return build_catalog(tmp_path)


@pytest.fixture
def scene_db(catalog_dir) -> SceneDatabase:
    return SceneDatabase(catalog_dir)


@pytest.fixture
def patch_dir(tmp_path) -> Path:
    """Directory holding a single 128x128 patch `p001` without base files."""
    directory = tmp_path / 'patches'
    write_patch(directory, 'p001', meta=PATCH_META)
    return directory


# =============================================================================
# CONFIG AND ADAPTERS
# =============================================================================

@pytest.fixture
def small_config() -> PipelineConfig:
    """Default ambiguity parameters, smaller candidate crops."""
    return PipelineConfig(patch_px=96)


@pytest.fixture
def golden():
    """Loader returning (fixture data, fresh scripted rqm, fresh scripted fsm)."""
    def load(name: str):
        data = load_fixture(name)
        rqm, fsm = scripted_adapters(AdapterScript.load(FIXTURES_DIR / name))
        return data, rqm, fsm
    return load

