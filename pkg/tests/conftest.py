import pytest

from stereomosaic._accel import ENV_FLAG


@pytest.fixture(params=["numba", "numpy"])
def backend(request, monkeypatch):
    monkeypatch.setenv(ENV_FLAG, "1" if request.param == "numba" else "0")
    return request.param


@pytest.fixture
def numpy_only(monkeypatch):
    monkeypatch.setenv(ENV_FLAG, "0")
