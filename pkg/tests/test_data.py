import gzip
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcaseg.data import (
    PackedDataset, SliceSample, SplitSpec, extract_axial_slices, load_packed, normalize, pack_dataset,
    preprocess_volume, read_manifest, read_nifti, resize, split, synth_generate,
)
from vcaseg.data.nifti import Volume
from vcaseg.errors import (
    BadMagicError, DataError, FormatError, NiftiError, ShapeError, TruncatedFileError, UnsupportedDatatypeError,
)

CODES = {np.dtype(np.uint8): (2, 8), np.dtype(np.int16): (4, 16), np.dtype(np.float32): (16, 32),
         np.dtype(np.float64): (64, 64)}


def write_nifti(path, data, endian="<", slope=0.0, inter=0.0, magic=b"n+1\x00", compress=False, dtype=None):
    """Standalone single-file NIfTI-1 writer (header fields per the public standard)."""
    data = np.asarray(data, dtype=dtype or np.asarray(data).dtype)
    code, bitpix = CODES[data.dtype]
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    dim = [data.ndim, *data.shape] + [1] * (7 - data.ndim)
    struct.pack_into(endian + "8h", hdr, 40, *dim)
    struct.pack_into(endian + "2h", hdr, 70, code, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1, *([1.0] * 7))
    struct.pack_into(endian + "3f", hdr, 108, 352.0, slope, inter)
    hdr[344:348] = magic
    body = data.astype(data.dtype.newbyteorder(endian)).tobytes(order="F")
    raw = bytes(hdr) + b"\x00" * 4 + body
    if compress:
        raw = gzip.compress(raw)
    path.write_bytes(raw)
    return path


class TestNifti:
    @pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
    @pytest.mark.parametrize("endian", ["<", ">"])
    @pytest.mark.parametrize("compress", [False, True])
    def test_round_trip(self, tmp_path, rng, dtype, endian, compress):
        data = (rng.random((5, 4, 3)) * 100).astype(dtype)
        p = write_nifti(tmp_path / ("v.nii.gz" if compress else "v.nii"), data, endian, compress=compress)
        vol = read_nifti(p)
        assert vol.dims == (5, 4, 3)
        np.testing.assert_array_equal(vol.voxels, data.astype(np.float64))
        assert vol.header.sizeof_hdr == 348 and vol.header.magic == b"n+1"

    def test_scaling(self, tmp_path, rng):
        raw = rng.integers(-50, 50, (4, 4, 2)).astype(np.int16)
        vol = read_nifti(write_nifti(tmp_path / "s.nii", raw, slope=2.0, inter=1.0))
        np.testing.assert_array_equal(vol.voxels, 2.0 * raw + 1.0)

    def test_float64_rejected(self, tmp_path):
        p = write_nifti(tmp_path / "d.nii", np.zeros((2, 2, 2), np.float64))
        with pytest.raises(UnsupportedDatatypeError, match="float64"):
            read_nifti(p)

    def test_bad_magic(self, tmp_path):
        p = write_nifti(tmp_path / "m.nii", np.zeros((2, 2, 2), np.uint8), magic=b"xyz\x00")
        with pytest.raises(NiftiError, match="magic"):
            read_nifti(p)

    def test_truncated(self, tmp_path):
        p = write_nifti(tmp_path / "t.nii", np.zeros((4, 4, 4), np.int16))
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(TruncatedFileError):
            read_nifti(p)

    def test_mask_snapped(self, tmp_path):
        m = np.zeros((3, 3, 2), np.float32)
        m[1, 1, 0] = 1.0000001
        assert set(np.unique(read_nifti(write_nifti(tmp_path / "m.nii", m), kind="mask").voxels)) == {0.0, 1.0}

    def test_mask_non_binary(self, tmp_path):
        with pytest.raises(NiftiError):
            read_nifti(write_nifti(tmp_path / "m.nii", np.full((2, 2, 2), 2, np.uint8)), kind="mask")


def _vol(arr, source=""):
    return Volume(np.asarray(arr, np.float64), None, source)


class TestSlices:
    def test_atlas_shape(self):
        vol = _vol(np.zeros((197, 233, 189), np.float32))
        pairs = extract_axial_slices(vol, vol)
        assert len(pairs) == 189
        assert pairs[0][0].shape == (233, 197)

    def test_small(self):
        v = _vol(np.arange(32).reshape(4, 4, 2))
        assert len(extract_axial_slices(v, v)) == 2

    def test_reassembly(self, rng):
        data = rng.random((6, 5, 4))
        v = _vol(data)
        rebuilt = np.zeros_like(data)
        for k, (img, _) in enumerate(extract_axial_slices(v, v)):
            rebuilt[:, :, k] = img.T
        np.testing.assert_array_equal(rebuilt, data)

    def test_mismatch_names_both(self):
        with pytest.raises(ShapeError) as ei:
            extract_axial_slices(_vol(np.zeros((4, 4, 2)), "img.nii"), _vol(np.zeros((4, 4, 3)), "seg.nii"))
        assert "img.nii" in str(ei.value) and "seg.nii" in str(ei.value)


def bilinear_reference(a, th, tw):
    """Half-pixel-centre bilinear, edge-clamped, one output pixel at a time."""
    h, w = a.shape
    out = np.zeros((th, tw))

    def coord(i, n_in, n_out):
        s = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, n_in - 1)
        return i0, i1, s - i0

    for i in range(th):
        r0, r1, fr = coord(i, h, th)
        for j in range(tw):
            c0, c1, fc = coord(j, w, tw)
            top = a[r0, c0] * (1 - fc) + a[r0, c1] * fc
            bot = a[r1, c0] * (1 - fc) + a[r1, c1] * fc
            out[i, j] = top * (1 - fr) + bot * fr
    return out


class TestResize:
    def test_2x2_reference(self):
        a = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = resize(a, (4, 4), "bilinear")
        np.testing.assert_array_equal(out, bilinear_reference(a, 4, 4))
        np.testing.assert_array_equal(out[0], [0, 0.25, 0.75, 1])

    def test_atlas_slice_reference(self, rng):
        a = rng.random((233, 197))
        np.testing.assert_allclose(resize(a), bilinear_reference(a, 224, 192), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("kind", ["bilinear", "nearest"])
    def test_constant(self, kind):
        np.testing.assert_allclose(resize(np.full((233, 197), 0.7), kind=kind), 0.7, rtol=1e-14)

    def test_nearest_binary(self, rng):
        m = (rng.random((233, 197)) < 0.3).astype(np.uint8)
        out = resize(m, kind="nearest")
        assert out.shape == (224, 192) and set(np.unique(out)) <= {0, 1}


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(1, 40), w=st.integers(1, 40),
       th=st.integers(1, 50), tw=st.integers(1, 50))
def test_resize_value_bounds(seed, h, w, th, tw):
    a = np.random.default_rng(seed).integers(0, 5, (h, w)).astype(np.float64)
    near = resize(a, (th, tw), "nearest")
    assert set(np.unique(near)) <= set(np.unique(a))
    bil = resize(a, (th, tw), "bilinear")
    assert bil.min() >= a.min() - 1e-12 and bil.max() <= a.max() + 1e-12


class TestNormalize:
    def test_identity_on_unit_range(self, rng):
        x = rng.random(100)
        x[0], x[1] = 0.0, 1.0
        np.testing.assert_allclose(normalize(x, 0, 100), x, atol=1e-15)

    def test_constant(self):
        assert not normalize(np.full((5, 5), 3.0)).any()

    def test_outlier(self, rng):
        x = rng.random(2000) * 10 + 5
        x[17] = x.max() * 10
        out = normalize(x)
        s = np.sort(x)
        # percentile with linear interpolation: position (n - 1) * p / 100
        pos = (len(s) - 1) * 0.99
        hi = s[int(pos)] + (s[int(pos) + 1] - s[int(pos)]) * (pos - int(pos))
        lo = s[0]
        assert out[17] == 1.0
        np.testing.assert_allclose(out, (np.minimum(x, hi) - lo) / (hi - lo), rtol=1e-12)


def _samples(n_vol, per_vol):
    img = np.zeros((224, 192), np.float32)
    return [SliceSample(img, img.astype(np.uint8), f"vol{v:03d}", k) for v in range(n_vol) for k in range(per_vol)]


class TestSplit:
    def test_ratio(self):
        train, val = split(_samples(10, 10))
        assert (len(train), len(val)) == (90, 10)

    def test_volume_no_leakage(self):
        train, val = split(_samples(20, 5), SplitSpec(level="volume", seed=3))
        assert {s.volume_id for s in train}.isdisjoint({s.volume_id for s in val})
        assert len(train) + len(val) == 100 and len({s.volume_id for s in val}) == 2

    def test_determinism(self):
        samples = _samples(229, 1)
        key = lambda part: [s.volume_id for s in part[1]]  # noqa: E731
        assert key(split(samples, SplitSpec(seed=1))) == key(split(samples, SplitSpec(seed=1)))
        assert key(split(samples, SplitSpec(seed=1))) != key(split(samples, SplitSpec(seed=2)))

    def test_too_few(self):
        with pytest.raises(DataError):
            split(_samples(1, 9))
        with pytest.raises(DataError):
            split(_samples(9, 5), SplitSpec(level="volume"))


@settings(max_examples=30, deadline=None)
@given(n_vol=st.integers(10, 40), per=st.integers(1, 4), seed=st.integers(0, 1000),
       level=st.sampled_from(["slice", "volume"]))
def test_split_is_partition(n_vol, per, seed, level):
    samples = _samples(n_vol, per)
    train, val = split(samples, SplitSpec(level=level, seed=seed))
    ids = lambda part: {(s.volume_id, s.slice_index) for s in part}  # noqa: E731
    assert ids(train).isdisjoint(ids(val))
    assert ids(train) | ids(val) == ids(samples)


class TestSynth:
    def test_no_lesions(self):
        assert all(not s.mask.any() for s in synth_generate(6, lesion_prob=0.0, seed=1))

    def test_all_lesions(self):
        samples = synth_generate(6, lesion_prob=1.0, seed=1)
        assert all(s.mask.any() for s in samples)
        for s in samples:
            # lesions are darker than their surroundings
            assert s.image[s.mask == 1].mean() < s.image[s.mask == 0].mean()

    def test_deterministic(self):
        a, b = synth_generate(4, 0.5, seed=9), synth_generate(4, 0.5, seed=9)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()

    def test_invariants(self):
        for s in synth_generate(5, 0.5, seed=2):
            assert s.image.shape == (224, 192) and s.image.dtype == np.float32
            assert 0 <= s.image.min() and s.image.max() <= 1
            assert set(np.unique(s.mask)) <= {0, 1}


class TestSliceSample:
    def test_out_of_range(self):
        with pytest.raises(DataError):
            SliceSample(np.full((4, 4), 1.5), np.zeros((4, 4)), "v", 0)

    def test_non_binary_mask(self):
        with pytest.raises(DataError):
            SliceSample(np.zeros((4, 4)), np.full((4, 4), 2), "v", 0)

    def test_shape(self):
        with pytest.raises(ShapeError):
            SliceSample(np.zeros((4, 4)), np.zeros((4, 5)), "v", 0)


class TestPacked:
    def test_round_trip(self, tmp_path):
        samples = synth_generate(5, 0.6, seed=4, volume_id="vé")
        assert pack_dataset(samples, tmp_path / "d.vcad") == 5
        back = load_packed(tmp_path / "d.vcad")
        for a, b in zip(samples, back):
            assert (a.volume_id, a.slice_index) == (b.volume_id, b.slice_index)
            assert a.image.tobytes() == b.image.tobytes() and a.mask.tobytes() == b.mask.tobytes()

    def test_truncated(self, tmp_path):
        p = tmp_path / "d.vcad"
        pack_dataset(synth_generate(3, 0.5, seed=0), p)
        p.write_bytes(p.read_bytes()[:-100])
        with pytest.raises(TruncatedFileError):
            load_packed(p)

    def test_bad_magic_and_trailing(self, tmp_path):
        p = tmp_path / "d.vcad"
        pack_dataset(synth_generate(1, 0.5, seed=0), p)
        raw = p.read_bytes()
        p.write_bytes(b"XXXX" + raw[4:])
        with pytest.raises(BadMagicError):
            load_packed(p)
        p.write_bytes(raw + b"\x00")
        with pytest.raises(FormatError):
            load_packed(p)

    def test_streaming_43281_entries(self, tmp_path):
        # 229 volumes x 189 slices; pixel data left as file holes so nothing large is written
        n_vol, per = 229, 189
        npix = 224 * 192
        p = tmp_path / "big.vcad"
        with open(p, "wb") as fh:
            fh.write(b"VCAD" + struct.pack("<II", 1, n_vol * per))
            pos = 12
            for v in range(n_vol):
                vid = f"sub{v:03d}".encode()
                head = struct.pack("<H", len(vid)) + vid
                for k in range(per):
                    fh.seek(pos)
                    fh.write(head + struct.pack("<I", k))
                    pos += len(head) + 4 + 5 * npix
            fh.truncate(pos)
        ds = PackedDataset(p)
        assert len(ds) == 43281
        assert ds.ids()[-1] == ("sub228", 188)
        s = ds[20000]
        assert (s.volume_id, s.slice_index) == (f"sub{20000 // per:03d}", 20000 % per)
        assert s.image.shape == (224, 192) and not s.mask.any()


class TestPipeline:
    def test_volume_to_samples(self, tmp_path, rng):
        img = (rng.random((197, 233, 3)) * 1000).astype(np.int16)
        seg = np.zeros((197, 233, 3), np.uint8)
        seg[50:80, 100:140, 1] = 1
        vi = read_nifti(write_nifti(tmp_path / "i.nii.gz", img, compress=True))
        vm = read_nifti(write_nifti(tmp_path / "m.nii.gz", seg, ">", compress=True), kind="mask")
        samples = preprocess_volume(vi, vm, "subj")
        assert [s.slice_index for s in samples] == [0, 1, 2]
        assert samples[1].mask.any() and not samples[0].mask.any()
        assert max(s.image.max() for s in samples) == 1.0

    def test_manifest(self, tmp_path):
        m = tmp_path / "m.tsv"
        m.write_text("# comment\na.nii\tb.nii\n\nc.nii\td.nii\n")
        assert read_manifest(m) == [("a.nii", "b.nii"), ("c.nii", "d.nii")]
        m.write_text("only-one-column\n")
        with pytest.raises(DataError):
            read_manifest(m)
