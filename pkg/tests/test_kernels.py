import numpy as np
import pytest
from helpers import make_family

from fedtd import kernels
from fedtd.errors import ConfigError
from fedtd.fed_td import StepSchedule, prepare_family, run_fedtd

pytestmark = pytest.mark.skipif("cython" not in kernels.available_backends(),
                                reason="compiled backend not built")


@pytest.fixture(scope="module")
def prepared():
    return prepare_family(make_family(n_states=8, n_actions=4, d=3, n_agents=5, seed=9))


class TestBackendIdentity:
    @pytest.mark.parametrize("alg", ["avg", "exp"])
    @pytest.mark.parametrize("mode", ["markovian", "iid"])
    @pytest.mark.parametrize("update_mode", ["sampled", "expected"])
    @pytest.mark.parametrize("beta", [0.2, 0.6, 1.0])
    def test_traces_bit_identical(self, prepared, alg, mode, update_mode, beta):
        runs = [run_fedtd(alg, prepared, StepSchedule(beta), 2500, mode, 21, update_mode,
                          stride=3, backend=b) for b in ("cython", "python")]
        a, b = runs
        assert np.array_equal(a.t, b.t)
        assert np.array_equal(a.err, b.err)
        assert np.array_equal(a.err_r, b.err_r)
        assert np.array_equal(a.final_param, b.final_param)
        assert a.final_r == b.final_r

    def test_divergence_identical(self, prepared):
        runs = [run_fedtd("avg", prepared, StepSchedule(), 50, theta0=np.full(3, 5e11), backend=b)
                for b in ("cython", "python")]
        assert runs[0].diverged_at == runs[1].diverged_at
        assert np.array_equal(runs[0].err, runs[1].err)


class TestSelection:
    def test_default_backend_is_available(self):
        assert kernels.BACKEND in kernels.available_backends()

    def test_unknown_backend(self):
        with pytest.raises(ConfigError):
            kernels.get_backend("fortran")

    def test_env_override_selects_fallback(self):
        import subprocess
        import sys

        out = subprocess.run(
            [sys.executable, "-c", "import fedtd.kernels as k; print(k.BACKEND)"],
            env={"FEDTD_PURE_PYTHON": "1", "PATH": ""}, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"
