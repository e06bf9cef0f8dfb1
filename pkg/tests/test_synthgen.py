import json
from collections import Counter

import numpy as np
import pytest

from ood_tricks.errors import ConfigError, FormatVersionError, ManifestError, PayloadSizeError, SplitError
from ood_tricks.synthgen import (
    ClassSpec,
    DomainSpec,
    GenerationConfig,
    build_class_specs,
    default_domains,
    generate_dataset,
    load_dataset,
    render_sample,
    save_dataset,
    split_by_domain,
)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(GenerationConfig(n_fine=8, n_coarse=4, n_domains=8, samples_per_cell=10))


class TestGenerate:
    def test_sample_count(self, dataset):
        assert len(dataset) == 8 * 8 * 10 == 640

    def test_deterministic_payload(self, dataset):
        again = generate_dataset(GenerationConfig(samples_per_cell=10))
        assert again.images.tobytes() == dataset.images.tobytes()
        assert again.equals(dataset)

    def test_different_seed_differs(self, dataset):
        other = generate_dataset(GenerationConfig(samples_per_cell=10, seed=1))
        assert other.images.tobytes() != dataset.images.tobytes()

    def test_round_robin_coarse_groups(self):
        # enumerate the default map by hand: fine i -> i mod 4
        specs = build_class_specs(8, 4)
        assert [s.coarse_id for s in specs] == [0, 1, 2, 3, 0, 1, 2, 3]
        counts = Counter(s.coarse_id for s in specs)
        assert all(counts[c] == 2 for c in range(4))

    def test_hierarchy_sound(self, dataset):
        for f, c in zip(dataset.fine_labels, dataset.coarse_labels):
            assert c == dataset.coarse_of(int(f))

    def test_pixel_range(self, dataset):
        assert dataset.images.min() >= 0.0 and dataset.images.max() <= 1.0
        assert dataset.images.dtype == np.float32

    def test_cell_balance(self, dataset):
        cells = Counter(zip(dataset.fine_labels.tolist(), dataset.domain_ids.tolist()))
        assert len(cells) == 64
        assert set(cells.values()) == {10}

    def test_domain_styles_unique(self):
        doms = default_domains(8)
        assert len({(d.background_kind, d.palette_seed) for d in doms}) == 8

    @pytest.mark.parametrize(
        "kwargs",
        [dict(n_fine=3, n_coarse=4), dict(n_coarse=0), dict(resolution=7), dict(samples_per_cell=0),
         dict(coarse_map=[0] * 8), dict(coarse_map=[0, 1, 2, 3, 0, 1, 2, 9])],
    )
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            generate_dataset(GenerationConfig(**kwargs))

    def test_coarse_map_override(self):
        d = generate_dataset(GenerationConfig(n_fine=4, n_coarse=2, n_domains=2, samples_per_cell=1,
                                              coarse_map=[1, 1, 0, 0]))
        assert [s.coarse_id for s in d.class_specs] == [1, 1, 0, 0]

    def test_duplicate_domain_style_rejected(self):
        doms = [dict(domain_id=0, background_kind="solid", palette_seed=3),
                dict(domain_id=1, background_kind="solid", palette_seed=3)]
        with pytest.raises(ConfigError):
            generate_dataset(GenerationConfig(domains=doms, samples_per_cell=1))


class TestRender:
    spec = ClassSpec(0, 0, "circle", "solid")
    dom = DomainSpec(0, "solid", 0)

    def test_range(self):
        s = render_sample(self.spec, self.dom, 5, 32)
        assert s.image.shape == (32, 32, 3)
        assert s.image.min() >= 0 and s.image.max() <= 1

    def test_deterministic(self):
        a = render_sample(self.spec, self.dom, 11, 32).image
        b = render_sample(self.spec, self.dom, 11, 32).image
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("shape", ["circle", "square", "triangle", "cross", "ring", "bar"])
    @pytest.mark.parametrize("res", [16, 32])
    def test_foreground_area(self, shape, res):
        spec = ClassSpec(0, 0, shape, "hstripes")
        for seed in range(25):
            _, mask = render_sample(spec, DomainSpec(1, "stripes", 1), seed, res, return_mask=True)
            assert 0.10 <= mask.mean() <= 0.60

    def test_occlusion_only_hides(self):
        spec = ClassSpec(0, 0, "square", "solid")
        _, clean = render_sample(spec, self.dom, 3, 32, return_mask=True)
        _, occl = render_sample(spec, self.dom, 3, 32, occlusion_prob=1.0, return_mask=True)
        assert occl.sum() <= clean.sum()
        assert not np.any(occl & ~clean)


class TestSplit:
    def test_counts(self, dataset):
        train, test = split_by_domain(dataset, range(6), [6, 7])
        assert (len(train), len(test)) == (480, 160)
        assert set(train.domain_ids.tolist()) == set(range(6))
        assert set(test.domain_ids.tolist()) == {6, 7}

    def test_overlap_rejected(self, dataset):
        with pytest.raises(SplitError):
            split_by_domain(dataset, [0, 1, 3], [3, 4])

    def test_unknown_domain_rejected(self, dataset):
        with pytest.raises(SplitError):
            split_by_domain(dataset, [0], [42])

    def test_partial_cover(self, dataset):
        excluded = int(np.sum(dataset.domain_ids == 7))
        train, test = split_by_domain(dataset, range(5), [5, 6])
        assert len(train) + len(test) == len(dataset) - excluded == 560


class TestPersistence:
    def test_round_trip(self, dataset, tmp_path):
        save_dataset(dataset, tmp_path / "d")
        loaded = load_dataset(tmp_path / "d")
        assert loaded.equals(dataset)
        m = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert m["format_version"] == 1 and m["dtype"] == "f32le" and m["layout"] == "HWC"
        offsets = [row[0] for row in m["sample_index"]]
        assert all(b > a for a, b in zip(offsets, offsets[1:]))

    def test_truncated_payload(self, dataset, tmp_path):
        save_dataset(dataset, tmp_path / "d")
        raw = (tmp_path / "d" / "pixels.bin").read_bytes()
        (tmp_path / "d" / "pixels.bin").write_bytes(raw[:-4])
        with pytest.raises(PayloadSizeError):
            load_dataset(tmp_path / "d")

    def test_unknown_version(self, dataset, tmp_path):
        save_dataset(dataset, tmp_path / "d")
        path = tmp_path / "d" / "manifest.json"
        m = json.loads(path.read_text())
        m["format_version"] = 2
        path.write_text(json.dumps(m))
        with pytest.raises(FormatVersionError):
            load_dataset(tmp_path / "d")

    def test_malformed_manifest(self, dataset, tmp_path):
        save_dataset(dataset, tmp_path / "d")
        path = tmp_path / "d" / "manifest.json"
        m = json.loads(path.read_text())
        del m["class_specs"]
        path.write_text(json.dumps(m))
        with pytest.raises(ManifestError):
            load_dataset(tmp_path / "d")
        path.write_text("{not json")
        with pytest.raises(ManifestError):
            load_dataset(tmp_path / "d")

    def test_split_round_trip(self, dataset, tmp_path):
        _, test = split_by_domain(dataset, range(6), [6, 7])
        save_dataset(test, tmp_path / "t")
        assert load_dataset(tmp_path / "t").equals(test)
