import pytest

from pointcaps.config import ModelConfig
from pointcaps.errors import ConfigError

MINIMAL = """
[model]
extractor = pointnet
aggregator = maxpool
classifier = capsule
"""


class TestParsing:
    def test_minimal_takes_published_defaults(self):
        cfg = ModelConfig.from_text(MINIMAL)
        assert (cfg.q, cfg.t, cfg.z, cfg.r) == (500, 8, 4, 3)
        assert cfg.resolved_final_width == 1024
        assert cfg.resolved_mlp_widths == ((64, 64), (64, 128))
        assert cfg.keep_prob == 0.7 and cfg.recon_alpha == 0.0005
        assert (cfg.lr, cfg.lr_step, cfg.lr_factor, cfg.batch_size) == (0.001, 20, 0.5, 16)

    def test_netvlad_defaults(self):
        cfg = ModelConfig.from_text(MINIMAL.replace("maxpool", "netvlad"))
        assert cfg.resolved_final_width == 128
        assert cfg.feature_width == 128 * 128

    def test_edgeconv_defaults(self):
        cfg = ModelConfig.from_text(MINIMAL.replace("pointnet", "edgeconv"))
        assert cfg.resolved_mlp_widths == ((64, 64, 64), (128,))

    def test_round_trip(self):
        cfg = ModelConfig.from_text(MINIMAL + "mlp_widths = 8,8; 16\nfc_hidden = 32,16\n[train]\nepochs = 3\n")
        again = ModelConfig.from_text(cfg.to_text())
        assert again == cfg
        assert again.mlp_widths == ((8, 8), (16,))

    @pytest.mark.parametrize(
        "text, key",
        [
            (MINIMAL.replace("classifier = capsule\n", ""), "classifier"),
            (MINIMAL + "bogus = 1\n", "bogus"),
            (MINIMAL + "q = many\n", "q"),
            (MINIMAL + "[train]\nq = 3\n", "q"),
            (MINIMAL.replace("capsule", "svm"), "classifier"),
            (MINIMAL + "keep_prob = 1.5\n", "keep_prob"),
            (MINIMAL + "r = 0\n", "r"),
        ],
    )
    def test_errors_name_the_key(self, text, key):
        with pytest.raises(ConfigError) as info:
            ModelConfig.from_text(text)
        assert info.value.key == key
        assert f"'{key}'" in str(info.value)

    def test_edgeconv_k_below_n(self):
        with pytest.raises(ConfigError, match="knn_k"):
            ModelConfig.from_text(MINIMAL.replace("pointnet", "edgeconv") + "[data]\nn_points = 16\n")

    def test_no_compose_needs_divisible_width(self):
        with pytest.raises(ConfigError, match="'t'"):
            ModelConfig.from_text(MINIMAL + "compose_caps = false\nfinal_width = 12\n")


class TestHash:
    def test_training_keys_do_not_change_architecture(self):
        cfg = ModelConfig.from_text(MINIMAL)
        assert cfg.architecture_hash() == cfg.replace(epochs=1, lr=0.1, seed=9).architecture_hash()

    def test_width_changes_architecture(self):
        cfg = ModelConfig.from_text(MINIMAL)
        assert cfg.architecture_hash() != cfg.replace(q=10).architecture_hash()
        assert cfg.architecture_hash() != cfg.replace(n_points=128).architecture_hash()
