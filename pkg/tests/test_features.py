import numpy as np
import pytest

from mexfuse.features import (
    GLOBAL_FRAME,
    LOCAL_TRACK,
    PROMPT,
    EmbedderConfig,
    ModalityFeatures,
    ProjectionMLP,
    concept_space,
    embed_synthetic,
    project,
    read_concept_manifest,
    truncate,
    write_concept_manifest,
)
from mexfuse.tensor import DegenerateInputError, DimensionError


def mean_pooled_cosine(a, b):
    va, vb = a.tokens[0].mean(axis=0), b.tokens[0].mean(axis=0)
    return float(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))


class TestEmbedSynthetic:
    def test_deterministic_bit_identical(self):
        cfg = EmbedderConfig(seed=3)
        a = embed_synthetic("car-1", LOCAL_TRACK, cfg)
        b = embed_synthetic("car-1", LOCAL_TRACK, cfg)
        assert np.array_equal(a.tokens, b.tokens)

    def test_distinct_across_entity_modality_seed(self):
        cfg = EmbedderConfig(seed=3)
        base = embed_synthetic("car-1", LOCAL_TRACK, cfg).tokens
        assert not np.array_equal(base, embed_synthetic("car-2", LOCAL_TRACK, cfg).tokens)
        assert not np.array_equal(base, embed_synthetic("car-1", GLOBAL_FRAME, cfg).tokens)
        other = EmbedderConfig(seed=4)
        assert not np.array_equal(base, embed_synthetic("car-1", LOCAL_TRACK, other).tokens)

    def test_shapes_match_paper_configuration(self):
        cfg = EmbedderConfig()
        assert embed_synthetic("e", GLOBAL_FRAME, cfg).tokens.shape == (1, 16, 768)
        assert embed_synthetic("e", LOCAL_TRACK, cfg).tokens.shape == (1, 16, 768)
        assert embed_synthetic("e", PROMPT, cfg).tokens.shape == (1, 20, 1024)

    def test_oracle_same_concept_high_cosine(self):
        cfg = EmbedderConfig(seed=5, oracle_mode=True, concepts=("red", "blue"))
        a = embed_synthetic("x1", LOCAL_TRACK, cfg, concept="red")
        b = embed_synthetic("x2", LOCAL_TRACK, cfg, concept="red")
        assert mean_pooled_cosine(a, b) >= 0.9

    def test_oracle_disjoint_concepts_low_cosine(self):
        cfg = EmbedderConfig(seed=5, oracle_mode=True, concepts=("red", "blue", "green"))
        a = embed_synthetic("x1", LOCAL_TRACK, cfg, concept="red")
        b = embed_synthetic("x2", LOCAL_TRACK, cfg, concept="blue")
        assert abs(mean_pooled_cosine(a, b)) <= 0.1

    def test_concept_space_orthonormal(self):
        cfg = EmbedderConfig(seed=1, oracle_mode=True, concepts=("a", "b", "c", "d"))
        basis = concept_space(cfg, 64)
        mat = np.stack(list(basis.values()))
        assert np.abs(mat @ mat.T - np.eye(4)).max() <= 1e-10

    def test_unknown_concept_rejected(self):
        cfg = EmbedderConfig(oracle_mode=True, concepts=("a",))
        with pytest.raises(KeyError):
            embed_synthetic("x", LOCAL_TRACK, cfg, concept="zzz")


class TestTruncate:
    def _features(self, s=20):
        return ModalityFeatures(PROMPT, np.arange(2 * s * 3, dtype=float).reshape(2, s, 3), "e")

    def test_full_length_unchanged(self):
        f = self._features(20)
        assert truncate(f, 20) is f

    def test_prefix_slice(self):
        f = self._features(20)
        out = truncate(f, 8)
        assert out.tokens.shape == (2, 8, 3)
        assert np.array_equal(out.tokens, f.tokens[:, :8, :])

    def test_min_rule(self):
        f = self._features(5)
        assert truncate(f, 8) is f

    def test_zero_rejected(self):
        with pytest.raises(DegenerateInputError):
            truncate(self._features(), 0)

    def test_composition(self):
        f = self._features(20)
        once = truncate(f, 6)
        twice = truncate(truncate(f, 13), 6)
        assert np.array_equal(once.tokens, twice.tokens)


class TestProject:
    def test_visual_paper_dims(self):
        rng = np.random.default_rng(0)
        mlp = ProjectionMLP.init(768, 256, rng)
        f = ModalityFeatures(LOCAL_TRACK, rng.standard_normal((2, 16, 768)), "e")
        assert project(f, mlp).data.shape == (2, 16, 256)

    def test_prompt_paper_dims(self):
        rng = np.random.default_rng(0)
        mlp = ProjectionMLP.init(1024, 256, rng)
        f = ModalityFeatures(PROMPT, rng.standard_normal((2, 20, 1024)), "e")
        assert project(f, mlp).data.shape == (2, 20, 256)

    def test_identity_passthrough(self):
        from mexfuse.tensor import Linear, Tensor

        d = 6
        mlp = ProjectionMLP(Linear(Tensor(np.eye(d)), Tensor(np.zeros(d))),
                            Linear(Tensor(np.eye(d)), Tensor(np.zeros(d))),
                            activation="identity")
        x = np.random.default_rng(1).standard_normal((1, 3, d))
        out = project(ModalityFeatures(LOCAL_TRACK, x, "e"), mlp)
        assert np.abs(out.data - x).max() <= 1e-12

    def test_dim_mismatch(self):
        rng = np.random.default_rng(0)
        mlp = ProjectionMLP.init(768, 256, rng)
        f = ModalityFeatures(PROMPT, rng.standard_normal((1, 20, 1024)), "e")
        with pytest.raises(DimensionError):
            project(f, mlp)

    def test_census(self):
        mlp = ProjectionMLP.init(768, 256, np.random.default_rng(0), hidden=512)
        assert mlp.param_count() == (768 * 512 + 512) + (512 * 256 + 256)


def test_concept_manifest_round_trip(tmp_path):
    entries = [{"entity_id": "t1", "modality": LOCAL_TRACK, "concept": "red"},
               {"entity_id": "p0", "modality": PROMPT, "concept": "blue"}]
    path = tmp_path / "concepts.jsonl"
    write_concept_manifest(path, entries)
    assert read_concept_manifest(path) == entries
