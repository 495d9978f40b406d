import numpy as np
import pytest

from needle_handover.config import builtin_profile, format_profile, load_profile, parse_profile
from needle_handover.errors import ConfigError


def test_builtin_profiles():
    cal = builtin_profile("calibrated")
    assert cal.noise.systematic_sigma == 0.001 and cal.noise.dropout == 0.05
    assert cal.noise.label_flip == 0.05
    zero = load_profile("zero")
    assert zero.noise.jitter_sigma == 0.0 and zero.noise.label_flip == 0.0
    assert load_profile(None).name == "calibrated"
    with pytest.raises(ConfigError):
        builtin_profile("loud")


def test_parse_sections_and_units():
    prof = parse_profile("""
[cameras]
fx = 1500
cx = 600.5
look_at = 0, 0.01, 0.05
[noise]
rot_jitter_deg = 1.0   # per move
dropout = 0.1
[needle]
arc_extent_deg = 150
[servo]
max_iterations = 7
[grasp]
initial_step = 0.002
[ransac]
iterations = 500
[harness]
step_latency = 0.5
""")
    assert prof.scene.fx == 1500.0 and prof.scene.cx == 600.5
    assert prof.scene.look_at == (0.0, 0.01, 0.05)
    assert prof.noise.rot_jitter_sigma == pytest.approx(np.radians(1.0))
    assert prof.noise.dropout == 0.1 and prof.noise.systematic_sigma == 0.001
    assert prof.needle.arc_extent == pytest.approx(np.radians(150))
    assert prof.servo.max_iterations == 7 and prof.grasp.initial_step == 0.002
    assert prof.ransac.iterations == 500 and prof.harness.step_latency == 0.5


@pytest.mark.parametrize("text", [
    "[nope]\na = 1\n",
    "[cameras]\nzoom = 2\n",
    "[scene]\nfx = 100\n",
    "[noise]\nrot_jitter_sigma = 0.1\n",
    "[servo]\nmax_iterations = lots\n",
    "[servo]\nmax_iterations = 0\n",
    "[ransac]\nseed = 3\n",
    "[cameras]\nlook_at = 1, 2\n",
    "not a section",
])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_profile(text)


def test_format_round_trip(tmp_path):
    prof = parse_profile("[noise]\ndropout = 0.2\ninhand_deg = 2.5\n[harness]\nn_max = 10\n")
    path = tmp_path / "p.ini"
    path.write_text(format_profile(prof))
    back = load_profile(str(path))
    assert back.to_dict()["noise"] == pytest.approx(prof.to_dict()["noise"])
    assert back.harness == prof.harness and back.scene == prof.scene
    with pytest.raises(ConfigError):
        load_profile(str(tmp_path / "missing.ini"))
