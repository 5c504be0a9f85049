import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from oracles import block_dct_matrix, brute_local_maxima, psnr_ref
from pqfrestore.errors import (
    ArgumentError,
    DegradeError,
    IngestError,
    LabelError,
    PairingError,
)
from pqfrestore.synth import synth_dataset, synth_sequence
from pqfrestore.videodata import (
    DegradationProfile,
    Manifest,
    ManifestEntry,
    VideoSequence,
    degrade,
    duplicate_keep_indices,
    label_pqfs,
    load_sequence,
    local_maxima,
    make_patches,
    pad_to_multiple,
    remove_duplicates,
    sample_every_k,
    save_sequence,
)


def _seq(frames, sid="s", labels=None):
    return VideoSequence(sid, np.asarray(frames, dtype=np.float32), None, labels)


def _random_seq(rng, n, h=8, w=8, levels=256):
    return _seq(rng.integers(0, levels, (n, h, w, 3)) / 255.0)


def _series_sequence(values):
    """LQ/GT pair whose per-frame PSNR series is ordered like ``values``."""
    gt = np.full((len(values), 4, 4, 3), 0.5, dtype=np.float32)
    # larger value -> smaller error -> higher PSNR; errors are distinct 8-bit steps
    lq = gt + (1 + max(values) - np.asarray(values, dtype=np.float32))[:, None, None, None] * (1 / 255.0)
    return _seq(lq, "lq"), _seq(gt, "gt")


class TestVideoSequence:
    def test_rejects_bad_labels(self):
        with pytest.raises(ArgumentError):
            _seq(np.zeros((3, 4, 4, 3)), labels=[True, False])
        with pytest.raises(ArgumentError):
            _seq(np.zeros((3, 4, 4, 3)), labels=[False, False, False])

    def test_rejects_out_of_range(self):
        with pytest.raises(ArgumentError):
            _seq(np.full((1, 4, 4, 3), 1.5))

    def test_subset_keeps_labels(self):
        s = _seq(np.zeros((4, 4, 4, 3)), labels=[True, False, True, False])
        sub = s.subset([1, 2])
        assert len(sub) == 2 and sub.pqf_labels == [False, True]


class TestLoadSave:
    def _write(self, d, indices, size=(6, 5), value=None):
        d.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(0)
        for i in indices:
            arr = rng.integers(0, 256, (*size, 3), dtype=np.uint8) if value is None else np.full((*size, 3), value, np.uint8)
            Image.fromarray(arr).save(d / f"frame_{i:05d}.png")

    def test_contiguous_directory(self, tmp_path):
        self._write(tmp_path, range(1, 6))
        seq = load_sequence(tmp_path)
        assert len(seq) == 5 and seq.shape == (6, 5)

    def test_gap_raises(self, tmp_path):
        self._write(tmp_path, [1, 3])
        with pytest.raises(IngestError):
            load_sequence(tmp_path)

    def test_inconsistent_shapes_raise(self, tmp_path):
        self._write(tmp_path, [1])
        self._write(tmp_path, [2], size=(7, 5))
        with pytest.raises(IngestError):
            load_sequence(tmp_path)

    def test_empty_raises(self, tmp_path):
        with pytest.raises(IngestError):
            load_sequence(tmp_path)

    def test_255_is_one(self, tmp_path):
        self._write(tmp_path, [1], value=255)
        assert np.all(load_sequence(tmp_path).frames == 1.0)

    def test_round_trip_bit_exact(self, tmp_path):
        seq = _random_seq(np.random.default_rng(1), 3, 9, 7)
        save_sequence(seq, tmp_path / "out")
        back = load_sequence(tmp_path / "out")
        np.testing.assert_array_equal(back.frames, seq.frames)


class TestPadding:
    def test_reflect_pad_to_multiple(self):
        f = np.arange(5 * 6 * 3, dtype=np.float32).reshape(5, 6, 3)
        out, orig = pad_to_multiple(f, 8)
        assert out.shape[:2] == (8, 8) and orig == (5, 6)
        np.testing.assert_array_equal(out[:5, :6], f)
        np.testing.assert_array_equal(out[5, :6], f[3])


class TestDegrade:
    def test_zero_pqf_strength_is_lossless_on_pqfs(self):
        gt = synth_sequence("a", 32, 9, seed=3)
        lq = degrade(gt, DegradationProfile(gop_period=4, base_strength=2.0, pqf_strength=0.0))
        for t in range(9):
            same = np.array_equal(lq.frames[t], gt.frames[t])
            assert same == (t % 4 == 0)

    def test_constant_frame_psnr_decreases_in_q(self):
        # direct computation: the DC coefficient of an 8x8 block is 8 * value
        # and it is the only one that survives quantisation
        v = 136 / 255  # chosen so the DC error survives 8-bit rounding at every q
        gt = _seq(np.full((2, 8, 8, 3), v))
        scores = []
        for q in (4, 8, 16):
            lq = degrade(gt, DegradationProfile(base_strength=q, pqf_strength=0.0))
            step = q * 0.02
            dc = 8 * round(v * 255) / 255
            expected_pixel = round(np.clip(round(dc / step) * step / 8, 0, 1) * 255) / 255
            np.testing.assert_allclose(lq.frames[1], expected_pixel, atol=1e-7)
            scores.append(psnr_ref(lq.frames[1], gt.frames[1]))
        assert all(math.isfinite(s) and s < 100 for s in scores)
        assert scores[0] > scores[1] > scores[2]

    def test_matches_explicit_dct_oracle(self):
        rng = np.random.default_rng(5)
        gt = _random_seq(rng, 2, 16, 16)
        prof = DegradationProfile(base_strength=3.0, pqf_strength=1.0)
        lq = degrade(gt, prof)
        m = block_dct_matrix(8)
        u = np.arange(8)
        step_matrix = 0.02 * (1 + 0.5 * (u[:, None] + u[None, :]))
        for t in range(2):
            steps = step_matrix * prof.strength(t)
            ref = np.zeros((16, 16, 3))
            for by in range(0, 16, 8):
                for bx in range(0, 16, 8):
                    for c in range(3):
                        blk = gt.frames[t, by : by + 8, bx : bx + 8, c].astype(np.float64)
                        coef = m @ blk @ m.T
                        coef = np.round(coef / steps) * steps
                        ref[by : by + 8, bx : bx + 8, c] = m.T @ coef @ m
            ref = np.round(np.clip(ref, 0, 1) * 255) / 255
            assert np.mean(np.abs(ref - lq.frames[t]) > 1e-6) < 0.01

    def test_deterministic(self):
        gt = synth_sequence("a", 32, 6, seed=1)
        prof = DegradationProfile(strength_jitter=0.3, seed=7)
        np.testing.assert_array_equal(degrade(gt, prof).frames, degrade(gt, prof).frames)

    def test_too_small_raises(self):
        with pytest.raises(DegradeError):
            degrade(_seq(np.zeros((1, 4, 4, 3))), DegradationProfile())

    def test_downsample_factor_four(self):
        gt = synth_sequence("a", 64, 2, seed=1)
        lq = degrade(gt, DegradationProfile(downsample_factor=4))
        assert lq.shape == (16, 16)

    def test_invalid_profiles(self):
        with pytest.raises(ArgumentError):
            DegradationProfile(base_strength=1.0, pqf_strength=1.0)
        with pytest.raises(ArgumentError):
            DegradationProfile(gop_period=1)
        with pytest.raises(ArgumentError):
            DegradationProfile(mode="external-codec")

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(5, 12), st.sampled_from([2, 3, 4]))
    def test_pqf_frames_better_on_average(self, seed, n, period):
        rng = np.random.default_rng(seed)
        gt = _random_seq(rng, n, 16, 16)
        prof = DegradationProfile(gop_period=period, base_strength=2.0, pqf_strength=0.5)
        lq = degrade(gt, prof)
        scores = np.array([psnr_ref(a, b) for a, b in zip(lq.frames, gt.frames)])
        pqf = np.arange(n) % period == 0
        assert scores[pqf].mean() > scores[~pqf].mean()

    def test_skip_repeats_copies_previous_output(self):
        gt = synth_sequence("a", 32, 12, seed=2, repeat_prob=0.5)
        lq = degrade(gt, DegradationProfile(skip_repeats=True))
        raw = np.round(gt.frames * 255)
        for t in range(1, 12):
            if np.array_equal(raw[t], raw[t - 1]):
                np.testing.assert_array_equal(lq.frames[t], lq.frames[t - 1])

    def test_external_codec_round_trip(self, tmp_path):
        # a "codec" that copies frames through unchanged
        cmd = "cp {input}/* {output}"
        prof = DegradationProfile(mode="external-codec", encoder_cmd=cmd)
        gt = synth_sequence("a", 16, 3, seed=0)
        np.testing.assert_array_equal(degrade(gt, prof).frames, gt.frames)


class TestRemoveDuplicates:
    def test_example(self):
        a, b, c = (np.full((4, 4, 3), v / 255.0) for v in (10, 20, 30))
        lq = _seq([a, a, b, c, c, c])
        gt = _seq(np.arange(6)[:, None, None, None] * np.ones((6, 4, 4, 3)) / 255.0)
        lq2, gt2 = remove_duplicates(lq, gt)
        assert len(lq2) == 3
        np.testing.assert_array_equal(lq2.frames, np.stack([a, b, c]).astype(np.float32))
        np.testing.assert_array_equal(np.round(gt2.frames[:, 0, 0, 0] * 255), [0, 2, 3])

    def test_no_duplicates_identity(self):
        rng = np.random.default_rng(0)
        lq, gt = _random_seq(rng, 5), _random_seq(rng, 5)
        lq2, gt2 = remove_duplicates(lq, gt)
        assert lq2 is lq and gt2 is gt

    def test_length_mismatch(self):
        rng = np.random.default_rng(0)
        with pytest.raises(PairingError):
            remove_duplicates(_random_seq(rng, 3), _random_seq(rng, 4))

    def test_pairing_idempotence_randomised(self):
        rng = np.random.default_rng(1234)
        for _ in range(100):
            n = int(rng.integers(1, 15))
            base = rng.integers(0, 4, n)  # few symbols -> many repeats
            lq = _seq(np.broadcast_to(base[:, None, None, None] / 255.0, (n, 2, 2, 3)))
            gt = _seq(np.broadcast_to(np.arange(n)[:, None, None, None] / 255.0, (n, 2, 2, 3)))
            lq1, gt1 = remove_duplicates(lq, gt)
            lq2, gt2 = remove_duplicates(lq1, gt1)
            np.testing.assert_array_equal(lq1.frames, lq2.frames)
            np.testing.assert_array_equal(gt1.frames, gt2.frames)
            src = np.round(gt1.frames[:, 0, 0, 0] * 255).astype(int)
            assert len(lq1) <= n and len(lq1) == len(gt1)
            expected = [0] + [t for t in range(1, n) if base[t] != base[t - 1]]
            assert list(src) == expected
            np.testing.assert_array_equal(np.round(lq1.frames[:, 0, 0, 0] * 255), base[src])

    def test_keep_indices(self):
        lq = _seq(np.zeros((3, 2, 2, 3)))
        assert duplicate_keep_indices(lq) == [0]


class TestLabelPqfs:
    def test_examples(self):
        assert local_maxima([30, 32, 31, 33, 30]) == [False, True, False, True, False]
        assert local_maxima([30, 31, 32]) == [False, False, True]
        prof = DegradationProfile(gop_period=4)
        lq = _seq(np.zeros((10, 8, 8, 3)))
        assert [i for i, v in enumerate(label_pqfs(lq, profile=prof)) if v] == [0, 4, 8]

    def test_needs_gt_or_profile(self):
        with pytest.raises(LabelError):
            label_pqfs(_seq(np.zeros((2, 8, 8, 3))))

    def test_series_through_psnr(self):
        lq, gt = _series_sequence([30, 32, 31, 33, 30])
        assert label_pqfs(lq, gt) == [False, True, False, True, False]

    def test_exhaustive_small_alphabets(self):
        # every series over {0,1} up to N=12 and over {0,1,2} up to N=7
        import itertools

        checked = 0
        for alphabet, nmax in ((2, 12), (3, 7)):
            for n in range(1, nmax + 1):
                for vals in itertools.product(range(alphabet), repeat=n):
                    vals = list(vals)
                    assert local_maxima(vals) == brute_local_maxima(vals), vals
                    checked += 1
        assert checked > 8000

    def test_exhaustive_through_sequences(self):
        import itertools

        for n in range(1, 9):
            for vals in itertools.product(range(3), repeat=n):
                lq, gt = _series_sequence(list(vals))
                assert label_pqfs(lq, gt) == brute_local_maxima(list(vals))


class TestSampling:
    def test_every_k(self):
        seq = _seq(np.zeros((100, 2, 2, 3)))
        out = sample_every_k(seq, 8)
        assert len(out) == 13 and out[-1][0] == 96
        assert len(sample_every_k(seq, 1)) == 100
        assert [i for i, _ in sample_every_k(_seq(np.zeros((7, 2, 2, 3))), 8)] == [0]
        with pytest.raises(ArgumentError):
            sample_every_k(seq, 0)

    def test_patch_shapes_and_alignment(self):
        gt = synth_sequence("a", 64, 8, seed=0)
        lq = degrade(gt, DegradationProfile())
        p = make_patches([(lq, gt)], 32, 5, rng=3)
        assert p.lq.frames.shape == (5, 32, 32, 3) and p.gt.frames.shape == (5, 32, 32, 3)
        (y, x), (t0, n) = p.crop_origin, p.temporal_window
        np.testing.assert_array_equal(p.gt.frames, gt.frames[t0 : t0 + n, y : y + 32, x : x + 32])
        q = make_patches([(lq, gt)], 32, 5, rng=3)
        assert q.crop_origin == p.crop_origin and q.temporal_window == p.temporal_window

    def test_scale_four_patch(self):
        gt = synth_sequence("a", 128, 3, seed=0)
        lq = degrade(gt, DegradationProfile(downsample_factor=4))
        p = make_patches([(lq, gt)], 32, 2, rng=0, scale=4)
        assert p.gt.frames.shape == (2, 128, 128, 3)

    def test_patch_too_large(self):
        gt = synth_sequence("a", 16, 3, seed=0)
        with pytest.raises(ArgumentError):
            make_patches([(gt, gt)], 32, 2, rng=0)


class TestManifest:
    def test_round_trip(self, tmp_path):
        gt = synth_sequence("a", 16, 3, seed=0)
        lq = degrade(gt, DegradationProfile())
        save_sequence(lq, tmp_path / "lq" / "a")
        save_sequence(gt, tmp_path / "gt" / "a")
        m = Manifest([ManifestEntry("a", "lq/a", "gt/a", [True, False, False], "val")], DegradationProfile(), str(tmp_path))
        m.save(tmp_path / "manifest.json")
        back = Manifest.load(tmp_path / "manifest.json")
        assert back.to_json() == m.to_json()
        (lq2, gt2), = back.load_pairs("val")
        np.testing.assert_array_equal(lq2.frames, lq.frames)
        assert lq2.pqf_labels == [True, False, False]
        assert back.load_pairs("train") == []


class TestSynth:
    def test_deterministic_and_distinct(self):
        a = synth_dataset(3, 32, 4, seed=0)
        b = synth_dataset(3, 32, 4, seed=0)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.frames, y.frames)
        assert not np.array_equal(a[0].frames, a[1].frames)

    def test_repeats_injected(self):
        s = synth_sequence("a", 16, 30, seed=0, repeat_prob=0.5)
        assert len(duplicate_keep_indices(s)) < 30
