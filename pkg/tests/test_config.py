import json

import pytest

from restorebot.config import PipelineConfig, dump_config, load_config
from restorebot.errors import InvalidConfig, SchemaError


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.octree.resolution == 0.15
    assert cfg.association.chi2_threshold == 5.991
    assert cfg.persistence.hazard_rate == 0.1
    assert cfg.world.rng_seed == cfg.seed == 0


def test_dump_load_round_trip(tmp_path):
    cfg = PipelineConfig.from_dict({"seed": 9, "world": {"plot_count": 3, "plots_per_treatment": 1},
                                    "simulation": {"plots": ["P01"]}, "association": {"mode": "location_only"}})
    (tmp_path / "c.json").write_text(dump_config(cfg))
    back = load_config(tmp_path / "c.json")
    assert back.to_dict() == cfg.to_dict()
    assert back.world.rng_seed == 9
    assert back.world.season_tags == cfg.world.season_tags


def test_with_seed_reseeds_world():
    assert PipelineConfig().with_seed(42).world.rng_seed == 42


@pytest.mark.parametrize("doc, where", [
    ({"bogus": 1}, "config"),
    ({"cluster": {"bogus": 1}}, "config.cluster"),
    ({"world": {"growth_model": {"bogus": 1}}}, "config.world.growth_model"),
    ({"world": {"rng_seed": 3}}, "config.world"),   # the top-level seed is the only seed
])
def test_unknown_keys_rejected(doc, where):
    with pytest.raises(InvalidConfig, match=f"unknown key.*{where}"):
        PipelineConfig.from_dict(doc)


@pytest.mark.parametrize("doc", [
    {"seed": -1},
    {"association": {"mode": "nearest"}},
    {"association": {"season_a": 1, "season_b": 1}},
    {"association": {"season_b": 2}},                     # not surveyed
    {"simulation": {"seasons": [0, 9], "plots": "all"}},
    {"simulation": {"plots": "some"}},
    {"persistence": {"p_detect": 1.5}},
    {"world": {"plot_count": 0}},
    {"report": {"sweep_seeds": 0}},
    {"octree": {"resolution": 1}, "cluster": []},
])
def test_out_of_range_rejected(doc):
    with pytest.raises(InvalidConfig):
        PipelineConfig.from_dict(doc)


def test_config_file_needs_header(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1}))
    with pytest.raises(SchemaError):
        load_config(tmp_path / "c.json")
