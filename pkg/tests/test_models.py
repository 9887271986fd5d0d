"""
Tests for the configuration and parse-graph models.
"""

import pytest

from sparsegen.models import (
    AndNode,
    DeconvSpec,
    DescriptorConfig,
    GeneratorConfig,
    LangevinConfig,
    LayerGraph,
    OrNode,
    ParseGraph,
    RunConfig,
    TrainConfig,
)


class TestGeneratorConfig:
    """Test cases for GeneratorConfig."""

    def test_defaults(self):
        config = GeneratorConfig()
        assert config.d == 20
        assert config.t_k == [4, 32]
        assert config.sigma == 0.3
        assert config.sparse
        assert config.num_layers == 2
        assert config.out_channels == 3

    def test_single_layer(self):
        config = GeneratorConfig(
            fc_shape=(3, 3, 2),
            layers=[DeconvSpec(kernel=3, stride=1, out_channels=1)],
            t_k=[2],
        )
        assert config.image_shape() == (5, 5, 1)
        assert config.D == 25

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            GeneratorConfig(sigma=0.0)

    def test_fc_shape_must_be_positive(self):
        with pytest.raises(ValueError, match="fc_shape"):
            GeneratorConfig(fc_shape=(0, 2, 64))

    def test_top_k_must_be_positive(self):
        with pytest.raises(ValueError, match="Top-K"):
            GeneratorConfig(t_k=[0, 32])

    def test_json_round_trip(self):
        config = GeneratorConfig(d=7, sparse=False)
        assert GeneratorConfig.model_validate_json(config.model_dump_json()) == config


class TestTrainingModels:
    """Test cases for the Langevin, training and descriptor configs."""

    def test_langevin_defaults(self):
        lcfg = LangevinConfig()
        assert (lcfg.delta, lcfg.steps, lcfg.noise_enabled) == (0.1, 20, True)
        assert lcfg.halve_on_divergence

    def test_negative_steps_rejected(self):
        with pytest.raises(ValueError):
            LangevinConfig(steps=-1)

    def test_train_defaults(self):
        tcfg = TrainConfig()
        assert tcfg.batch_size == 20
        assert tcfg.optimizer.kind == "adam"
        assert tcfg.warm_start
        assert tcfg.sigma is None

    def test_unknown_optimizer(self):
        with pytest.raises(ValueError):
            TrainConfig(optimizer={"kind": "rmsprop"})

    def test_descriptor_defaults(self):
        dcfg = DescriptorConfig()
        assert [c.out_channels for c in dcfg.convs] == [32, 64]
        assert (dcfg.sigma_q, dcfg.delta, dcfg.steps) == (1.0, 0.02, 10)


class TestRunConfig:
    """Test cases for the flat RunConfig mirror."""

    def test_defaults_match_component_configs(self):
        run = RunConfig()
        assert run.generator_config() == GeneratorConfig()
        tcfg = run.train_config()
        assert tcfg.epochs == TrainConfig().epochs
        assert tcfg.learning_rate == TrainConfig().learning_rate
        assert tcfg.langevin.delta == LangevinConfig().delta
        assert run.descriptor_config() == DescriptorConfig()

    def test_seed_reaches_langevin(self):
        assert RunConfig(seed=9).langevin_config().seed == 9

    def test_flat_fields_map_to_nested(self):
        run = RunConfig(
            optimizer="sgd",
            adam_beta1=0.5,
            langevin_steps=3,
            descriptor_steps=0,
            warm_start=False,
        )
        tcfg = run.train_config()
        assert tcfg.optimizer.kind == "sgd"
        assert tcfg.optimizer.beta1 == 0.5
        assert tcfg.langevin.steps == 3
        assert not tcfg.warm_start
        assert run.descriptor_config().steps == 0

    def test_unknown_keys_rejected(self):
        with pytest.raises(ValueError, match="extra"):
            RunConfig(learning_rat=0.1)


class TestParseGraphModels:
    """Test cases for the AND-OR graph models."""

    def test_rank_and_layer_not_serialized(self):
        node = AndNode(x=0, y=1, layer=2, or_nodes=[OrNode(channel=4, coeff=0.5, j=3)])
        assert node.model_dump() == {
            "x": 0,
            "y": 1,
            "or_nodes": [{"channel": 4, "coeff": 0.5}],
        }

    def test_and_node_needs_an_or_node(self):
        with pytest.raises(ValueError):
            AndNode(x=0, y=0, or_nodes=[])

    def test_layer_lookup(self):
        pg = ParseGraph(
            layers=[LayerGraph(layer=1, k_total=0), LayerGraph(layer=2, k_total=0)]
        )
        assert pg.layer(2).layer == 2
        with pytest.raises(KeyError):
            pg.layer(3)
