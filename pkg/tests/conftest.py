from pathlib import Path

import pytest

from sammon.loader import bundled_example, load_text

FIXTURES = Path(__file__).parent / "fixtures"
MAF_PATH = Path(__file__).parent.parent / "src" / "sammon" / "data" / "maf.sam"


@pytest.fixture(scope="session")
def maf_text():
    return bundled_example()


@pytest.fixture(scope="session")
def maf(maf_text):
    return load_text(maf_text)


@pytest.fixture(scope="session")
def toy():
    return load_text((FIXTURES / "toy.sam").read_text())


@pytest.fixture
def maf_path():
    return str(MAF_PATH)
