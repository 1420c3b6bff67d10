import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rigcn import data, geom


def single_triangle():
    return data.Mesh(
        vertices=np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0]]),
        faces=np.array([[0, 1, 2]]),
    )


class TestSampleMeshSurface:
    def test_points_stay_on_the_triangle(self):
        pts = data.sample_mesh_surface(single_triangle(), 500, np.random.default_rng(0))
        assert np.abs(pts[:, 2]).max() < 1e-12  # plane equation z = 0
        # barycentric bounds: x, y >= 0 and x + y <= 1
        assert pts.min() >= -1e-12
        assert (pts[:, 0] + pts[:, 1]).max() <= 1 + 1e-12

    def test_area_proportional_face_choice(self):
        # two triangles with area ratio 4:1
        mesh = data.Mesh(
            vertices=np.array(
                [[0.0, 0, 0], [4.0, 0, 0], [0.0, 2, 0], [10.0, 0, 0], [11.0, 0, 0], [10.0, 2, 0]]
            ),
            faces=np.array([[0, 1, 2], [3, 4, 5]]),
        )
        pts = data.sample_mesh_surface(mesh, 100_000, np.random.default_rng(1))
        on_small = (pts[:, 0] >= 9.0).sum()
        p = 1.0 / 5.0
        sigma = np.sqrt(100_000 * p * (1 - p))
        assert abs(on_small - 100_000 * p) < 3 * sigma

    def test_zero_area_faces_never_selected(self):
        mesh = data.Mesh(
            vertices=np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [5.0, 5, 5]]),
            faces=np.array([[0, 1, 2], [3, 3, 3]]),
        )
        pts = data.sample_mesh_surface(mesh, 2000, np.random.default_rng(2))
        assert np.abs(pts[:, 2]).max() < 1e-12

    def test_degenerate_mesh_rejected(self):
        mesh = data.Mesh(vertices=np.zeros((3, 3)), faces=np.array([[0, 1, 2]]))
        with pytest.raises(ValueError):
            data.sample_mesh_surface(mesh, 10, np.random.default_rng(0))

    def test_area_uniform_density_chi_square(self):
        # split one square into two equal triangles; bin by which half
        mesh = data.Mesh(
            vertices=np.array([[0.0, 0, 0], [1.0, 0, 0], [1.0, 1, 0], [0.0, 1, 0]]),
            faces=np.array([[0, 1, 2], [0, 2, 3]]),
        )
        pts = data.sample_mesh_surface(mesh, 100_000, np.random.default_rng(3))
        counts = np.histogram2d(pts[:, 0], pts[:, 1], bins=4, range=[[0, 1], [0, 1]])[0].ravel()
        expected = 100_000 / 16
        chi2 = ((counts - expected) ** 2 / expected).sum()
        # chi-square with 15 dof: p > 0.001 equivalent to chi2 < 37.7
        assert chi2 < 37.7


class TestOffFiles:
    def test_minimal_valid_file(self, tmp_path):
        path = tmp_path / "tri.off"
        path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
        mesh = data.read_off(path)
        assert mesh.vertices.shape == (3, 3)
        assert mesh.faces.shape == (1, 3)

    def test_quad_fan_triangulated(self, tmp_path):
        path = tmp_path / "quad.off"
        path.write_text(
            "OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n"
        )
        mesh = data.read_off(path)
        assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]

    def test_header_error_carries_line(self, tmp_path):
        path = tmp_path / "bad.off"
        path.write_text("OFFX\n3 1 0\n")
        with pytest.raises(data.ParseError, match="line 1"):
            data.read_off(path)

    def test_face_index_out_of_range(self, tmp_path):
        path = tmp_path / "bad.off"
        path.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 9\n")
        with pytest.raises(data.ParseError, match="line 6"):
            data.read_off(path)

    def test_non_numeric_token(self, tmp_path):
        path = tmp_path / "bad.off"
        path.write_text("OFF\n3 one 0\n")
        with pytest.raises(data.ParseError, match="line 2"):
            data.read_off(path)

    def test_comments_are_skipped(self, tmp_path):
        path = tmp_path / "c.off"
        path.write_text("OFF # header\n# counts next\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
        assert data.read_off(path).faces.shape == (1, 3)


class TestXyzFiles:
    def test_round_trip_preserves_values(self, tmp_path):
        pts = np.random.default_rng(4).normal(size=(100, 3))
        path = tmp_path / "cloud.xyz"
        data.write_xyz(pts, path)
        np.testing.assert_allclose(data.read_xyz(path), pts, atol=1e-10)

    def test_round_trip_is_exact_for_float64(self, tmp_path):
        pts = np.random.default_rng(5).normal(size=(50, 3))
        path = tmp_path / "cloud.xyz"
        data.write_xyz(pts, path)
        np.testing.assert_array_equal(data.read_xyz(path), pts)

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.xyz"
        path.write_text("0 0 0\n1 2\n")
        with pytest.raises(data.ParseError, match="line 2"):
            data.read_xyz(path)

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "bad.xyz"
        path.write_text("0 0 zero\n")
        with pytest.raises(data.ParseError, match="line 1"):
            data.read_xyz(path)


class TestSyntheticDataset:
    def test_reproducible_from_seed(self):
        spec = data.SyntheticSpec(classes=("sphere", "torus"), instances_per_class=4)
        a = data.generate_synthetic_dataset(spec, np.random.default_rng(6))
        b = data.generate_synthetic_dataset(spec, np.random.default_rng(6))
        for x, y in zip(a.train + a.test, b.train + b.test):
            np.testing.assert_array_equal(x.cloud, y.cloud)
            assert (x.label, x.source_id) == (y.label, y.source_id)

    def test_split_sizes_under_default_rule(self):
        spec = data.SyntheticSpec(
            classes=("sphere", "cube"), instances_per_class=10, points_per_cloud=256
        )
        split = data.generate_synthetic_dataset(spec, np.random.default_rng(7))
        assert len(split.train) == 16
        assert len(split.test) == 4

    def test_every_cloud_is_normalized(self):
        spec = data.SyntheticSpec(instances_per_class=2, points_per_cloud=64)
        split = data.generate_synthetic_dataset(spec, np.random.default_rng(8))
        for item in split.train + split.test:
            assert np.abs(item.cloud.mean(axis=0)).max() < 1e-9
            assert abs(np.linalg.norm(item.cloud, axis=1).max() - 1.0) < 1e-9

    def test_all_families_generate(self):
        spec = data.SyntheticSpec(instances_per_class=2, points_per_cloud=128)
        split = data.generate_synthetic_dataset(spec, np.random.default_rng(9))
        labels = {it.label for it in split.train}
        assert labels == set(range(len(data.FAMILIES)))

    def test_source_ids_disjoint_across_splits(self):
        spec = data.SyntheticSpec(instances_per_class=5)
        split = data.generate_synthetic_dataset(spec, np.random.default_rng(10))
        train_ids = {it.source_id for it in split.train}
        test_ids = {it.source_id for it in split.test}
        assert not train_ids & test_ids

    @given(st.sampled_from(sorted(data.FAMILIES)))
    @settings(max_examples=8, deadline=None)
    def test_families_have_distinct_extent_profiles(self, family):
        pts = data.FAMILIES[family](np.random.default_rng(11), 256)
        assert pts.shape == (256, 3)
        assert np.isfinite(pts).all()

    def test_bad_specs_rejected(self):
        with pytest.raises(ValueError):
            data.SyntheticSpec(classes=("sphere",)).validate()
        with pytest.raises(ValueError):
            data.SyntheticSpec(classes=("sphere", "blob")).validate()
        with pytest.raises(ValueError):
            data.SyntheticSpec(instances_per_class=1, train_fraction=0.5).validate()


class TestManifest:
    def test_save_load_round_trip(self, tmp_path):
        spec = data.SyntheticSpec(
            classes=("torus", "cube", "helix"), instances_per_class=3, points_per_cloud=32
        )
        split = data.generate_synthetic_dataset(spec, np.random.default_rng(12))
        manifest = data.save_dataset(split, tmp_path)
        again = data.load_manifest(manifest)
        assert again.class_names == split.class_names
        assert len(again.train) == len(split.train)
        assert len(again.test) == len(split.test)
        for a, b in zip(split.train + split.test, again.train + again.test):
            assert (a.label, a.source_id) == (b.label, b.source_id)
            np.testing.assert_array_equal(a.cloud, b.cloud)

    def test_manifest_header_checked(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("a,b\n")
        with pytest.raises(data.ParseError, match="line 1"):
            data.load_manifest(path)

    def test_unknown_split_rejected(self, tmp_path):
        path = tmp_path / "manifest.csv"
        path.write_text("source_id,split,class_name,path\nx,holdout,sphere,x.xyz\n")
        with pytest.raises(data.ParseError, match="line 2"):
            data.load_manifest(path)
