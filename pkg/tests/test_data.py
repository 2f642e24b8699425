import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualdis import data as D


class TestRenderer:
    def test_mirror_equals_flip_bit(self):
        rng = np.random.default_rng(0)
        for cls in range(5):
            z = [float(b) for b in rng.integers(0, 2, 6)]
            params = D.draw_params(rng)
            img = D.render(cls, z, params)
            z2 = list(z)
            z2[3] = 1.0 - z2[3]
            assert np.array_equal(img[:, :, ::-1], D.render(cls, z2, params))

    def test_attributes_toggle_one_parameter(self):
        rng = np.random.default_rng(1)
        params = D.draw_params(rng)
        base = D.render(2, [0.0] * 6, params)
        for attr in range(6):
            z = [0.0] * 6
            z[attr] = 1.0
            assert not np.array_equal(base, D.render(2, z, params))

    def test_oracle_exact_on_clean_renders(self):
        rng = np.random.default_rng(7)
        for cls in range(5):
            for _ in range(24):
                z = tuple(float(b) for b in rng.integers(0, 2, 6))
                img = D.render(cls, z, D.draw_params(rng))
                y_hat, z_hat = D.classify_oracle(img)
                assert y_hat == cls
                assert tuple(z_hat) == tuple(int(b) for b in z)

    def test_oracle_exact_on_grayscale(self):
        rng = np.random.default_rng(9)
        for cls in range(5):
            z = tuple(float(b) for b in rng.integers(0, 2, 6))
            img = D.render(cls, z, D.draw_params(rng), channels=1)
            y_hat, z_hat = D.classify_oracle(img)
            assert y_hat == cls and tuple(z_hat) == tuple(int(b) for b in z)


class TestGeneration:
    def test_counts_and_balanced_marginals(self, tmp_path):
        spec = D.SyntheticSpec(samples_per_class=200, seed=3)
        manifest = D.generate_synthetic(spec, tmp_path / "d")
        assert len(manifest.rows) == 1000
        z = np.array([r.z for r in manifest.rows])
        marginals = z.mean(axis=0)
        assert np.all(np.abs(marginals - 0.5) <= 0.02)
        per_class = z.reshape(5, 200, 6).mean(axis=1)
        assert np.all(np.abs(per_class - 0.5) <= 0.02)
        manifest.check_files()

    def test_bitwise_deterministic(self, tmp_path):
        spec = D.SyntheticSpec(samples_per_class=10, seed=4)
        m1 = D.generate_synthetic(spec, tmp_path / "a")
        m2 = D.generate_synthetic(spec, tmp_path / "b")
        for r1, r2 in zip(m1.rows, m2.rows):
            assert r1.filename == r2.filename and r1.z == r2.z
            assert (tmp_path / "a" / r1.filename).read_bytes() == (tmp_path / "b" / r2.filename).read_bytes()

    def test_labels_recoverable_from_files(self, tmp_path):
        spec = D.SyntheticSpec(samples_per_class=12, seed=6)
        manifest = D.generate_synthetic(spec, tmp_path / "d")
        store = D.ImageStore(manifest.root)
        for row in manifest.rows:
            y_hat, z_hat = D.classify_oracle(store.get(row.filename))
            assert y_hat == row.y
            assert tuple(z_hat) == tuple(int(v) for v in row.z)

    def test_invalid_specs_rejected(self):
        with pytest.raises(D.DataError):
            D.SyntheticSpec(samples_per_class=7).validate()  # odd
        with pytest.raises(D.DataError):
            D.SyntheticSpec(image_size=16).validate()  # glyph boxes do not fit
        with pytest.raises(D.DataError):
            D.SyntheticSpec(channels=4).validate()


class TestManifest:
    def test_csv_round_trip(self, tmp_path):
        manifest = D.generate_synthetic(D.SyntheticSpec(samples_per_class=6, seed=1), tmp_path)
        manifest = D.split(manifest, 0.3, 0.2, seed=0)
        manifest.save(tmp_path / "m.csv")
        again = D.Manifest.load(tmp_path / "m.csv")
        assert again.rows == manifest.rows

    def test_schema_header(self, tmp_path):
        manifest = D.generate_synthetic(D.SyntheticSpec(samples_per_class=4, seed=1), tmp_path)
        manifest.save(tmp_path / "m.csv")
        header = (tmp_path / "m.csv").read_text().splitlines()[0]
        assert header == "filename,y,z_0,z_1,z_2,z_3,z_4,z_5,split"


class TestNorbLabels:
    def test_lighting_mapping(self):
        assert D.norb_soft_labels(5, 50, 0)[0] == 1.0
        assert D.norb_soft_labels(2, 50, 0)[0] == 0.0
        assert D.norb_soft_labels(0, 50, 0)[0] == pytest.approx(0.6)

    def test_elevation_cluster_center(self):
        z = D.norb_soft_labels(0, 50, 0)
        assert z[1:4].tolist() == [0.0, 1.0, 0.0]

    def test_elevation_midpoint(self):
        z = D.norb_soft_labels(0, 42.5, 0)
        assert z[1:4].tolist() == pytest.approx([0.5, 0.5, 0.0])

    def test_azimuth_wraparound(self):
        # 355 degrees is 5 degrees from center 0 on the circle -> 1 - 5/9
        z = D.norb_soft_labels(0, 50, 340.0)
        assert z[4] == pytest.approx(0.0)  # distance 20 > 9
        z_at_center = D.norb_soft_labels(0, 50, 180.0)
        assert z_at_center[6] == 1.0

    def test_azimuth_divisor_configurable(self):
        z = D.norb_soft_labels(0, 50, 45.0, azimuth_divisor=90.0)
        assert z[4] == pytest.approx(0.5)
        assert z[5] == pytest.approx(0.5)

    def test_out_of_range_rejected(self):
        with pytest.raises(D.DataError):
            D.norb_soft_labels(6, 50, 0)
        with pytest.raises(D.DataError):
            D.norb_soft_labels(0, 75, 0)
        with pytest.raises(D.DataError):
            D.norb_soft_labels(0, 50, 350)

    @given(
        e=st.floats(30, 70),
        a=st.floats(0, 340),
        light=st.integers(0, 5),
    )
    @settings(max_examples=200, deadline=None)
    def test_values_in_unit_interval(self, e, a, light):
        z = D.norb_soft_labels(light, e, a)
        assert np.all(z >= 0.0) and np.all(z <= 1.0)

    @given(e=st.floats(30, 69.5), delta=st.floats(0.01, 0.5))
    @settings(max_examples=100, deadline=None)
    def test_elevation_lipschitz(self, e, delta):
        # piecewise linear with slope 1/15 per cluster
        z1 = D.norb_soft_labels(0, e, 100)
        z2 = D.norb_soft_labels(0, min(e + delta, 70.0), 100)
        assert np.all(np.abs(z2[1:4] - z1[1:4]) <= delta / 15.0 + 1e-6)


class TestYaleClusters:
    def _table(self):
        # synthetic 14-cell partition: 2 elevation bands x 7 azimuth bands
        ids = [[j for j in range(7)], [7 + j for j in range(7)]]
        edges_e = (-90.0, 0.0, 90.0)
        edges_a = tuple(-130.0 + k * (260.0 / 7) for k in range(8))
        return D.ClusterTable(edges_e, edges_a, tuple(tuple(r) for r in ids))

    def test_one_hot_sums_to_one(self):
        table = self._table()
        z = D.yale_light_cluster(10.0, 0.0, table)
        assert z.sum() == 1.0 and z.shape == (14,)

    def test_cell_centers_round_trip(self):
        table = self._table()
        for i in range(2):
            for j in range(7):
                e = (table.elevation_edges[i] + table.elevation_edges[i + 1]) / 2
                a = (table.azimuth_edges[j] + table.azimuth_edges[j + 1]) / 2
                assert table.cluster_of(e, a) == table.ids[i][j]

    def test_partition_has_no_gaps(self):
        table = self._table()
        hit = set()
        for e in np.linspace(-89.9, 89.9, 37):
            for a in np.linspace(-129.9, 129.9, 53):
                hit.add(table.cluster_of(float(e), float(a)))
        assert hit == set(range(14))

    def test_outside_table_rejected(self):
        with pytest.raises(D.DataError):
            D.yale_light_cluster(95.0, 0.0, self._table())


class TestSplit:
    def _manifest(self, tmp_path, n=40):
        return D.generate_synthetic(D.SyntheticSpec(samples_per_class=n, seed=2), tmp_path)

    def test_tags_disjoint_and_cover(self, tmp_path):
        manifest = D.split(self._manifest(tmp_path), 0.2, 0.2, seed=1)
        tags = [r.split for r in manifest.rows]
        assert set(tags) == {"train", "val", "test"}
        assert len(tags) == len(manifest.rows)

    def test_per_class_stratified(self, tmp_path):
        manifest = D.split(self._manifest(tmp_path), 0.2, 0.2, seed=1)
        for y in range(5):
            rows = [r for r in manifest.rows if r.y == y]
            n_test = sum(r.split == "test" for r in rows)
            assert n_test == round(len(rows) * 0.2)
            n_val = sum(r.split == "val" for r in rows)
            assert n_val == round((len(rows) - n_test) * 0.2)

    def test_stable_under_row_reordering(self, tmp_path):
        base = self._manifest(tmp_path)
        shuffled = D.Manifest(root=base.root, rows=list(reversed(base.rows)))
        t1 = {r.filename: r.split for r in D.split(base, 0.25, 0.2, seed=9).rows}
        t2 = {r.filename: r.split for r in D.split(shuffled, 0.25, 0.2, seed=9).rows}
        assert t1 == t2

    def test_dataset_preset_fractions(self):
        assert D.SPLIT_PRESETS["celeba"] == 0.2
        assert D.SPLIT_PRESETS["yale"] == 0.5

    def test_small_class_rejected(self, tmp_path):
        manifest = self._manifest(tmp_path, n=4)
        manifest.rows = [r for r in manifest.rows if r.y != 0 or r.filename.endswith("00000.png")]
        with pytest.raises(D.DataError):
            D.split(manifest, 0.2, 0.2, seed=0)


class TestBatching:
    def test_batch_count_and_final_partial(self, tmp_path):
        manifest = D.generate_synthetic(D.SyntheticSpec(samples_per_class=200, seed=1), tmp_path)
        manifest = D.Manifest(root=manifest.root, rows=[
            D.ManifestRow(r.filename, r.y, r.z, "train") for r in manifest.rows
        ])
        batches = list(D.load_batches(manifest, "train", 128))
        assert len(batches) == 8
        assert len(batches[-1].y) == 1000 - 7 * 128

    def test_same_seed_same_order(self, tmp_path):
        manifest = D.generate_synthetic(D.SyntheticSpec(samples_per_class=8, seed=1), tmp_path)
        manifest = D.split(manifest, 0.25, 0.2, seed=0)
        b1 = [b.y for b in D.load_batches(manifest, "train", 8, shuffle_seed=42)]
        b2 = [b.y for b in D.load_batches(manifest, "train", 8, shuffle_seed=42)]
        assert all(torch.equal(a, b) for a, b in zip(b1, b2))

    def test_pixel_range_on_known_white_image(self, tmp_path):
        white = np.ones((3, 32, 32), dtype=np.float32)
        D.save_image(white, tmp_path / "w.png")
        back = D.load_image(tmp_path / "w.png")
        assert np.all(back == 1.0)

    def test_unreadable_file_names_it(self, tmp_path):
        manifest = D.Manifest(root=tmp_path, rows=[D.ManifestRow("missing.png", 0, (0.0,), "train")])
        with pytest.raises(D.DataError) as err:
            list(D.load_batches(manifest, "train", 4))
        assert "missing.png" in str(err.value)

    def test_ssl_mask_marks_labeled_rows(self, tmp_path):
        manifest = D.generate_synthetic(D.SyntheticSpec(samples_per_class=8, seed=1), tmp_path)
        manifest = D.Manifest(root=manifest.root, rows=[
            D.ManifestRow(r.filename, r.y, r.z, "train") for r in manifest.rows
        ])
        labeled = D.choose_labeled(manifest, 0.25, seed=0)
        batch = next(D.load_batches(manifest, "train", 40, labeled=labeled))
        assert int(batch.mask_z.sum()) == len(labeled)
        assert bool(batch.mask_y.all())
