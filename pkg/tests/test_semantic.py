import numpy as np
import pytest

from qgrec.numerics import Rng
from qgrec.semantic import (
    DEFAULT_USER_TEMPLATE,
    EmbeddingFormatError,
    HttpProviderConfig,
    MockEmbeddingServer,
    PromptTemplate,
    ProviderError,
    provide_file,
    provide_http,
    provide_synthetic,
    read_embeddings,
    read_embeddings_jsonl,
    render_prompt,
    TemplateError,
    write_embeddings,
    write_embeddings_jsonl,
)


class TestPromptTemplate:
    def test_simple_substitution(self):
        tpl = PromptTemplate("user", "User likes {genre}")
        assert tpl.render({"genre": "jazz"}) == "User likes jazz"

    def test_missing_placeholder_named(self):
        tpl = PromptTemplate("user", "User likes {genre}")
        with pytest.raises(TemplateError, match="genre"):
            tpl.render({})

    def test_whitespace_normalized(self):
        tpl = PromptTemplate("user", "a   {x}\n\t b ")
        assert tpl.render({"x": "1"}) == "a 1 b"

    def test_full_profile_contains_all_fields(self):
        features = {"age": "25", "gender": "F", "occupation": "artist",
                    "zip": "02139", "uid": "17"}
        out = render_prompt(DEFAULT_USER_TEMPLATE, features,
                            history=["Alien", "Heat"],
                            aspects=["genres", "eras"])
        for v in features.values():
            assert v in out
        assert "Alien" in out and "Heat" in out

    def test_deterministic(self):
        features = {"a": 1, "b": 2}
        r1 = render_prompt(DEFAULT_ITEM := DEFAULT_USER_TEMPLATE, features)
        r2 = render_prompt(DEFAULT_ITEM, features)
        assert r1 == r2


class TestEmbeddingFile:
    def test_small_round_trip(self, tmp_path):
        p = tmp_path / "e.semv"
        vecs = {i: np.arange(8, dtype=np.float32) + i for i in (3, 1, 2)}
        write_embeddings(p, vecs)
        out, dim = read_embeddings(p)
        assert dim == 8
        assert sorted(out) == [1, 2, 3]
        for k in vecs:
            assert np.array_equal(out[k], vecs[k])

    def test_dim_mismatch_rejected(self, tmp_path):
        p = tmp_path / "e.semv"
        write_embeddings(p, {1: np.zeros(8, np.float32)})
        with pytest.raises(EmbeddingFormatError, match="dim"):
            read_embeddings(p, expected_dim=16)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "e.semv"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(EmbeddingFormatError, match="magic"):
            read_embeddings(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "e.semv"
        write_embeddings(p, {1: np.zeros(8, np.float32), 2: np.ones(8, np.float32)})
        data = p.read_bytes()
        p.write_bytes(data[:-5])
        with pytest.raises(EmbeddingFormatError, match="truncated"):
            read_embeddings(p)

    def test_bitwise_round_trip_1000(self, tmp_path):
        rng = Rng(0)
        vecs = {i: rng.normal(size=32) for i in range(1, 1001)}
        p1, p2 = tmp_path / "a.semv", tmp_path / "b.semv"
        write_embeddings(p1, vecs)
        out, _ = read_embeddings(p1)
        write_embeddings(p2, out)
        assert p1.read_bytes() == p2.read_bytes()
        for i in vecs:
            assert out[i].tobytes() == vecs[i].astype("<f4").tobytes()

    def test_jsonl_round_trip(self, tmp_path):
        p = tmp_path / "e.jsonl"
        vecs = {1: np.array([1.5, -2.0], np.float32), 7: np.array([0.0, 3.25], np.float32)}
        write_embeddings_jsonl(p, vecs)
        out, dim = read_embeddings_jsonl(p)
        assert dim == 2
        assert np.array_equal(out[7], vecs[7])


class TestSyntheticProvider:
    def test_zero_noise_collapses_clusters(self):
        vecs, labels, stats = provide_synthetic(20, 8, 4, 0.0, Rng(1))
        assert stats.calls == 20
        by_label = {}
        for eid in range(1, 21):
            by_label.setdefault(int(labels[eid]), []).append(vecs[eid])
        for group in by_label.values():
            for v in group[1:]:
                assert np.array_equal(v, group[0])

    def test_single_cluster_three_sigma(self):
        dim = 16
        sigma = 0.05
        vecs, labels, _ = provide_synthetic(50, dim, 1, sigma, Rng(2))
        center_vecs, _, _ = provide_synthetic(1, dim, 1, 0.0, Rng(2))
        center = center_vecs[1]
        for eid, v in vecs.items():
            # dimension-normalized deviation stays within 3 sigma
            rms = np.sqrt(((v - center) ** 2).mean())
            assert rms < 3 * sigma

    def test_nearest_center_recovers_all_labels(self):
        vecs, labels, _ = provide_synthetic(1000, 64, 8, 0.05, Rng(3))
        # materialize the exact centers: zero noise, one entity per cluster,
        # same seed so the center draw is identical
        one_per = np.array([-1] + list(range(8)))
        centers, _, _ = provide_synthetic(8, 64, 8, 0.0, Rng(3), labels=one_per)
        cmat = np.stack([centers[c + 1] for c in range(8)])
        hits = 0
        for eid in range(1, 1001):
            d = ((cmat - vecs[eid]) ** 2).sum(axis=1)
            hits += int(d.argmin() == labels[eid])
        assert hits == 1000

    def test_reproducible(self):
        a = provide_synthetic(10, 4, 2, 0.1, Rng(9))[0]
        b = provide_synthetic(10, 4, 2, 0.1, Rng(9))[0]
        for k in a:
            assert np.array_equal(a[k], b[k])

    def test_planted_labels_respected(self):
        labels = np.array([-1, 0, 0, 1, 1])
        vecs, out_labels, _ = provide_synthetic(4, 8, 2, 0.0, Rng(0), labels=labels)
        assert np.array_equal(out_labels, labels)
        assert np.array_equal(vecs[1], vecs[2])
        assert not np.array_equal(vecs[1], vecs[3])


class TestFileProvider:
    def test_calls_equal_entities(self, tmp_path):
        p = tmp_path / "e.semv"
        rng = Rng(4)
        write_embeddings(p, {i: rng.normal(size=8) for i in range(1, 11)})
        vecs, stats = provide_file(p, expected_dim=8)
        assert len(vecs) == 10
        assert stats.calls == 10 and stats.entities == 10 and stats.failures == 0


class TestHttpProvider:
    def test_one_call_per_entity(self):
        prompts = {i: f"entity {i}" for i in range(1, 26)}
        with MockEmbeddingServer(dim=8) as server:
            cfg = HttpProviderConfig(endpoint=server.url, max_in_flight=4,
                                     backoff_base_ms=1)
            vecs, stats = provide_http(cfg, prompts, expected_dim=8)
            assert stats.calls == 25 and stats.entities == 25 and stats.failures == 0
            assert server.served_requests == 25
        assert sorted(vecs) == sorted(prompts)

    def test_retry_then_success(self):
        prompts = {1: "a", 2: "b", 3: "c"}
        with MockEmbeddingServer(dim=4, fail_first={2: 1}) as server:
            cfg = HttpProviderConfig(endpoint=server.url, retries=3,
                                     backoff_base_ms=1)
            vecs, stats = provide_http(cfg, prompts)
            assert stats.calls == 3 and stats.failures == 0
            assert len(vecs) == 3

    def test_endpoint_down_aborts(self):
        cfg = HttpProviderConfig(endpoint="http://127.0.0.1:9/none",
                                 retries=1, timeout_ms=200, backoff_base_ms=1)
        with pytest.raises(ProviderError, match="failed"):
            provide_http(cfg, {1: "a", 2: "b"})

    def test_mock_is_deterministic(self):
        prompts = {1: "same prompt"}
        with MockEmbeddingServer(dim=6) as s1:
            v1, _ = provide_http(HttpProviderConfig(endpoint=s1.url), prompts)
        with MockEmbeddingServer(dim=6) as s2:
            v2, _ = provide_http(HttpProviderConfig(endpoint=s2.url), prompts)
        assert np.array_equal(v1[1], v2[1])

    def test_cache_written(self, tmp_path):
        prompts = {i: f"p{i}" for i in range(1, 5)}
        cache = tmp_path / "cache.semv"
        with MockEmbeddingServer(dim=8) as server:
            cfg = HttpProviderConfig(endpoint=server.url)
            vecs, _ = provide_http(cfg, prompts, cache_path=cache)
        reloaded, stats = provide_file(cache, expected_dim=8)
        assert stats.calls == 4
        for k in vecs:
            assert np.array_equal(reloaded[k], vecs[k])
