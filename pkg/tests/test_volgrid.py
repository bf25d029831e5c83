"""Tests for the volume data model, file I/O, and preprocessing."""

import numpy as np
import pytest

from regseg.volgrid import (Mask, Segmentation, Volume, load_segmentation, load_volume,
                            rescale_intensity, resample_isotropic, save_segmentation,
                            save_volume, torso_mask)


def write_raw_volume(tmp_path, dims, values, element_type="MET_FLOAT", spacing=(1, 1, 1)):
    raw = tmp_path / "vol.raw"
    np.asarray(values, dtype="<f4" if element_type == "MET_FLOAT" else "u1").tofile(raw)
    header = tmp_path / "vol.mhd"
    header.write_text(
        "NDims = 3\n"
        f"DimSize = {dims[0]} {dims[1]} {dims[2]}\n"
        f"ElementSpacing = {spacing[0]} {spacing[1]} {spacing[2]}\n"
        "Offset = 0 0 0\n"
        f"ElementType = {element_type}\n"
        "ElementDataFile = vol.raw\n"
    )
    return header


class TestVolumeIO:
    def test_load_sequential_values_x_fastest(self, tmp_path):
        path = write_raw_volume(tmp_path, (4, 4, 4), np.arange(64))
        vol = load_volume(path)
        assert vol.dims == (4, 4, 4)
        assert vol.data[0, 0, 0] == 0
        assert vol.data[3, 3, 3] == 63
        # x varies fastest in the payload
        assert vol.data[1, 0, 0] == 1
        assert vol.data[0, 1, 0] == 4
        assert vol.data[0, 0, 1] == 16

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(3)
        vol = Volume(rng.random((5, 6, 7)).astype(np.float32),
                     spacing=(0.5, 1.0, 2.0), origin=(-3.0, 1.5, 8.0))
        save_volume(vol, tmp_path / "v.mhd")
        back = load_volume(tmp_path / "v.mhd")
        assert np.array_equal(back.data, vol.data)
        assert back.spacing == vol.spacing
        assert back.origin == vol.origin

    def test_header_records_spacing(self, tmp_path):
        save_volume(Volume(np.zeros((2, 2, 2), dtype=np.float32)), tmp_path / "v.mhd")
        text = (tmp_path / "v.mhd").read_text()
        assert "ElementSpacing = 1 1 1" in text
        assert "ElementType = MET_FLOAT" in text

    def test_short_payload_rejected(self, tmp_path):
        path = write_raw_volume(tmp_path, (4, 4, 4), np.arange(40))
        with pytest.raises(ValueError, match="payload size mismatch"):
            load_volume(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_volume(tmp_path / "nope.mhd")

    def test_unsupported_element_type(self, tmp_path):
        path = write_raw_volume(tmp_path, (2, 2, 2), np.arange(8))
        text = path.read_text().replace("MET_FLOAT", "MET_SHORT")
        path.write_text(text)
        with pytest.raises(ValueError, match="unsupported element type"):
            load_volume(path)

    def test_zero_sized_dims_rejected_before_write(self, tmp_path):
        vol = Volume(np.zeros((2, 2, 2), dtype=np.float32))
        vol.data = np.zeros((0, 2, 2), dtype=np.float32)
        with pytest.raises(ValueError):
            save_volume(vol, tmp_path / "v.mhd")
        assert not (tmp_path / "v.raw").exists()

    def test_segmentation_round_trip_with_names(self, tmp_path):
        labels = np.zeros((4, 4, 4), dtype=np.uint8)
        labels[1:3, 1:3, 1:3] = 1
        labels[0, 0, 0] = 2
        seg = Segmentation(labels, {0: "background", 1: "prostate", 2: "rectum"})
        save_segmentation(seg, tmp_path / "s.mhd")
        back = load_segmentation(tmp_path / "s.mhd")
        assert np.array_equal(back.labels, labels)
        assert back.label_names == seg.label_names


class TestVolumeInvariants:
    def test_zero_dims_rejected(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((0, 3, 3)))

    def test_negative_spacing_rejected(self):
        with pytest.raises(ValueError):
            Volume(np.zeros((2, 2, 2)), spacing=(1, -1, 1))

    def test_noncontiguous_label_names_rejected(self):
        with pytest.raises(ValueError, match="contiguous"):
            Segmentation(np.zeros((2, 2, 2), dtype=np.uint8), {0: "bg", 2: "organ"})


class TestResample:
    def test_identity_when_already_isotropic(self):
        vol = Volume(np.random.default_rng(0).random((6, 6, 6)))
        out = resample_isotropic(vol, 1.0)
        assert np.array_equal(out.data, vol.data)
        assert out.spacing == (1.0, 1.0, 1.0)

    def test_extent_arithmetic(self):
        vol = Volume(np.zeros((10, 10, 20), dtype=np.float32), spacing=(1, 1, 0.5))
        out = resample_isotropic(vol, 1.0)
        assert out.dims == (10, 10, 10)
        assert out.spacing == (1.0, 1.0, 1.0)

    def test_linear_ramp_matches_analytic(self):
        # value = z index, spacing 2 mm along z -> f(p) = p/2 at physical position p
        nz = 10
        data = np.broadcast_to(np.arange(nz, dtype=np.float64), (4, 4, nz)).copy()
        vol = Volume(data, spacing=(1.0, 1.0, 2.0))
        out = resample_isotropic(vol, 1.0)
        assert out.dims == (4, 4, 20)
        expected = np.arange(20) / 2.0
        # last output sample sits past the source grid (clamped); compare in-support ones
        got = out.data[2, 2, :19]
        assert np.abs(got - expected[:19]).max() < 1e-6


class TestRescale:
    def test_three_point_map(self):
        vol = Volume(np.array([0.0, 500.0, 1000.0]).reshape(3, 1, 1))
        out = rescale_intensity(vol, -1, 1)
        assert np.allclose(out.data.ravel(), [-1, 0, 1])

    def test_constant_maps_to_midpoint(self):
        out = rescale_intensity(Volume(np.full((3, 3, 3), 42.0)), -1, 1)
        assert np.all(out.data == 0)

    def test_asymmetric_values(self):
        vol = Volume(np.array([-100.0, 0.0, 300.0]).reshape(3, 1, 1))
        out = rescale_intensity(vol, -1, 1)
        assert np.allclose(out.data.ravel(), [-1, -0.5, 1])

    def test_output_bounds_random(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            vol = Volume(rng.normal(size=(5, 5, 5)) * rng.uniform(1, 100))
            out = rescale_intensity(vol, -1, 1)
            assert out.data.min() == -1
            assert out.data.max() == 1

    def test_nonfinite_rejected(self):
        data = np.zeros((2, 2, 2))
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            rescale_intensity(Volume(data), -1, 1)


def brute_force_components(fg):
    """Independent 6-connected component labeling by BFS."""
    comp = np.full(fg.shape, -1, dtype=int)
    n = 0
    for start in map(tuple, np.argwhere(fg)):
        if comp[start] >= 0:
            continue
        stack = [start]
        comp[start] = n
        while stack:
            x, y, z = stack.pop()
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
                               (0, 0, 1), (0, 0, -1)):
                p = (x + dx, y + dy, z + dz)
                if all(0 <= p[i] < fg.shape[i] for i in range(3)) and fg[p] and comp[p] < 0:
                    comp[p] = n
                    stack.append(p)
        n += 1
    return comp, n


class TestTorsoMask:
    def test_solid_cube(self):
        data = np.full((12, 12, 12), -1.0)
        data[3:9, 3:9, 3:9] = 1.0
        mask = torso_mask(Volume(data))
        expected = data > -0.75
        assert np.array_equal(mask.data, expected)

    def test_isolated_voxel_excluded(self):
        data = np.full((14, 14, 14), -1.0)
        data[3:9, 3:9, 3:9] = 1.0
        data[12, 12, 12] = 1.0
        mask = torso_mask(Volume(data))
        comp, n = brute_force_components(data > -0.75)
        assert n == 2
        sizes = [(comp == i).sum() for i in range(n)]
        largest = comp == int(np.argmax(sizes))
        assert np.array_equal(mask.data, largest)
        assert not mask.data[12, 12, 12]

    def test_hollow_shell_interior_filled(self):
        data = np.full((14, 14, 14), -1.0)
        data[3:11, 3:11, 3:11] = 1.0
        data[5:9, 5:9, 5:9] = -1.0  # cavity
        mask = torso_mask(Volume(data))
        # flood-fill oracle: interior = voxels unreachable from the border background
        outside = np.zeros(data.shape, dtype=bool)
        shell = data > -0.75
        stack = [tuple(p) for p in np.argwhere(~shell)
                 if 0 in p or (p == np.array(data.shape) - 1).any()]
        for p in stack:
            outside[p] = True
        while stack:
            x, y, z = stack.pop()
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0),
                               (0, 0, 1), (0, 0, -1)):
                p = (x + dx, y + dy, z + dz)
                if (all(0 <= p[i] < data.shape[i] for i in range(3))
                        and not shell[p] and not outside[p]):
                    outside[p] = True
                    stack.append(p)
        expected = shell | (~shell & ~outside)
        assert np.array_equal(mask.data, expected)
        assert mask.data[6, 6, 6]

    def test_empty_foreground_errors(self):
        with pytest.raises(ValueError, match="no torso"):
            torso_mask(Volume(np.full((4, 4, 4), -1.0)))

    def test_idempotent_under_masking(self):
        rng = np.random.default_rng(5)
        data = np.full((16, 16, 16), -1.0)
        data[4:12, 4:12, 4:12] = rng.uniform(-0.5, 1.0, (8, 8, 8))
        data[6:8, 6:8, 6:8] = -0.9  # interior pocket below threshold
        vol = Volume(data)
        mask = torso_mask(vol)
        masked = data.copy()
        masked[~mask.data] = -1.0
        again = torso_mask(Volume(masked))
        assert np.array_equal(mask.data, again.data)
