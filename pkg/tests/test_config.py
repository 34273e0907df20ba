"""Config parsing, canonical serialization, and override handling.

Oracles: round-trips are checked with dataclass equality (every parameter
block is a frozen dataclass, so `==` compares every field exactly), and the
canonical text form is pinned against hand-written lines.
"""

import pytest

from planereg.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_to_text,
    load_config,
    parse_config,
)
from planereg.pipeline import PipelineParams
from planereg.solver import SolverOptions
from planereg.synthetic import SceneSpec


class TestRoundTrip:
    def test_default_config_round_trips_exactly(self):
        """parse(to_text(c)) == c: repr floats make serialization lossless."""
        config = RunConfig()
        assert parse_config(config_to_text(config)) == config

    def test_customized_config_round_trips_exactly(self):
        config = RunConfig(
            association_file="data/assoc.txt",
            fx=520.25,
            cy=239.0,
            descriptor="oracle",
            seed=17,
            sweep_ratios=(0.0, 0.5, 0.9),
            pipeline=PipelineParams(
                fragment_size=11,
                solver=SolverOptions(mu_init=2.0, max_outer=7),
            ),
            scene=SceneSpec(preset="corridor", n_frames=4, seed=3),
        )
        assert parse_config(config_to_text(config)) == config

    def test_serialization_is_canonical(self):
        """Same config, same bytes: keys sorted, one assignment per line."""
        text = config_to_text(RunConfig())
        lines = [l for l in text.splitlines() if l]
        assert lines == sorted(lines)
        assert all(" = " in l for l in lines)
        assert text == config_to_text(RunConfig())

    def test_solver_keys_land_in_pipeline_solver(self):
        config = parse_config("solver.mu_init = 4.0\nransac.iterations = 99\n")
        assert config.pipeline.solver.mu_init == 4.0
        assert config.pipeline.ransac.iterations == 99
        # the property aliases read through to the same objects
        assert config.solver is config.pipeline.solver
        assert config.ransac is config.pipeline.ransac

    def test_comments_and_blank_lines_ignored(self):
        config = parse_config("# a comment\n\nrun.seed = 5\n")
        assert config.seed == 5


class TestValueParsing:
    def test_tuple_of_floats(self):
        config = parse_config("sweep.ratios = 0.1, 0.2, 0.3\n")
        assert config.sweep_ratios == (0.1, 0.2, 0.3)

    def test_fixed_arity_tuple(self):
        config = parse_config("scene.room = 2.0, 2.5, 6.0\n")
        assert config.scene.room == (2.0, 2.5, 6.0)

    def test_fixed_arity_tuple_wrong_length(self):
        with pytest.raises(ConfigError, match="expected 3"):
            parse_config("scene.room = 2.0, 2.5\n")

    def test_optional_tuple_none_and_value(self):
        assert parse_config("scene.traj_start = none\n").scene.traj_start is None
        assert parse_config("scene.traj_start =\n").scene.traj_start is None
        config = parse_config("scene.traj_start = 1.0, 1.2, 0.4\n")
        assert config.scene.traj_start == (1.0, 1.2, 0.4)

    def test_bool_strict(self):
        assert parse_config("solver.kp_squared = false\n").solver.kp_squared is False
        with pytest.raises(ConfigError, match="expected true or false"):
            parse_config("solver.kp_squared = yes\n")

    def test_bad_float_raises(self):
        with pytest.raises(ConfigError, match="expected a number"):
            parse_config("camera.fx = wide\n")

    def test_bad_int_raises(self):
        with pytest.raises(ConfigError, match="expected an integer"):
            parse_config("run.seed = 1.5\n")


class TestKeySpace:
    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            parse_config("nonsense.key = 1\n")

    def test_unknown_key_in_known_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config("solver.definitely_not_a_knob = 1\n")

    def test_pipeline_solver_not_addressable_as_pipeline_key(self):
        """solver/ransac have their own sections; pipeline.* hides them."""
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config("pipeline.solver = x\n")

    def test_missing_section_prefix_rejected(self):
        with pytest.raises(ConfigError, match="section prefix"):
            parse_config("seed = 1\n")

    def test_malformed_line_rejected(self):
        with pytest.raises(ConfigError, match="line 1"):
            parse_config("this is not an assignment\n")


class TestValidation:
    def test_bad_descriptor_rejected(self):
        with pytest.raises(ConfigError, match="descriptor"):
            parse_config("run.descriptor = cnn\n")

    def test_nested_invariants_surface_as_config_errors(self):
        """Parameter-block validation (here: solver) reports as ConfigError."""
        with pytest.raises(ConfigError):
            parse_config("solver.mu_init = -1.0\n")
        with pytest.raises(ConfigError):
            parse_config("extraction.normal_window_px = 4\n")

    def test_sweep_ratio_out_of_range(self):
        with pytest.raises(ConfigError, match="sweep.ratios"):
            parse_config("sweep.ratios = 0.0, 1.0\n")


class TestOverrides:
    def test_override_applies_on_top_of_config(self):
        config = parse_config("run.seed = 3\n")
        out = apply_overrides(config, ["run.seed=9", "solver.mu_init=2.0"])
        assert out.seed == 9
        assert out.solver.mu_init == 2.0

    def test_override_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            apply_overrides(RunConfig(), ["solver.nope=1"])

    def test_override_without_equals_rejected(self):
        with pytest.raises(ConfigError, match="key=value"):
            apply_overrides(RunConfig(), ["solver.mu_init"])

    def test_override_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="expected a number"):
            apply_overrides(RunConfig(), ["camera.fx=wide"])

    def test_no_overrides_returns_same_config(self):
        config = RunConfig()
        assert apply_overrides(config, []) is config


class TestLoadConfig:
    def test_load_from_file(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text(config_to_text(RunConfig(seed=21)))
        assert load_config(path).seed == 21

    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError, match="config file not found"):
            load_config(tmp_path / "absent.conf")
