import pytest


@pytest.fixture(autouse=True)
def _runtime_dir(tmp_path, monkeypatch):
    # control sockets of CLI sessions started by tests stay inside tmp_path
    d = tmp_path / "run"
    d.mkdir()
    monkeypatch.setenv("GCKPT_RUNTIME_DIR", str(d))
