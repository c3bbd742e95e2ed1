import math
import struct
import xml.etree.ElementTree as ET
import zlib

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from agn import data as D
from agn.errors import InputError, ParseError
from agn.layers import velocity

from conftest import t64


def random_seq(rng, frames=12, joints=4):
    return D.MotionSequence((rng.standard_normal((frames, joints, 3)) * 300).astype(np.float32), fps=25)


class TestFormats:
    def test_motb_round_trip_bitwise(self, rng, tmp_path):
        seq = random_seq(rng)
        D.save(seq, tmp_path / "a.motb")
        back = D.load(tmp_path / "a.motb")
        assert back.coords.tobytes() == seq.coords.tobytes()
        assert back.fps == 25

    def test_motb_from_independent_writer(self, rng, tmp_path):
        coords = rng.standard_normal((5, 2, 3)).astype(np.float32)
        body = b"MOTB" + struct.pack("<IIII", 1, 2, 5, 50000)
        for f in range(5):
            for j in range(2):
                for c in range(3):
                    body += struct.pack("<f", float(coords[f, j, c]))
        (tmp_path / "w.motb").write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        seq = D.load(tmp_path / "w.motb")
        np.testing.assert_array_equal(seq.coords, coords)
        assert seq.fps == 50.0

    def test_motb_corruption(self, rng, tmp_path):
        path = tmp_path / "a.motb"
        D.save(random_seq(rng), path)
        blob = bytearray(path.read_bytes())
        blob[30] ^= 1
        path.write_bytes(bytes(blob))
        with pytest.raises(ParseError, match="checksum"):
            D.load(path)
        path.write_bytes(b"NOPE" + bytes(blob[4:]))
        with pytest.raises(ParseError, match="magic"):
            D.load(path)

    def test_csv_round_trip(self, rng, tmp_path):
        seq = random_seq(rng)
        D.save(seq, tmp_path / "a.csv")
        back = D.load(tmp_path / "a.csv")
        np.testing.assert_allclose(back.coords, seq.coords, atol=1e-6)
        assert back.n_joints == 4

    def test_csv_without_header(self, tmp_path):
        (tmp_path / "b.csv").write_text("1,2,3,4,5,6\n7,8,9,10,11,12\n")
        seq = D.load(tmp_path / "b.csv")
        assert (seq.n_frames, seq.n_joints) == (2, 2)

    def test_csv_ragged_row_names_line(self, tmp_path):
        (tmp_path / "c.csv").write_text("# joints=1 fps=25\n1,2,3\n1,2\n")
        with pytest.raises(ParseError, match=r"c\.csv:3"):
            D.load(tmp_path / "c.csv")

    def test_csv_non_finite(self, tmp_path):
        (tmp_path / "d.csv").write_text("1,2,nan\n")
        with pytest.raises(ParseError, match=":1"):
            D.load(tmp_path / "d.csv")

    def test_csv_bad_header(self, tmp_path):
        (tmp_path / "e.csv").write_text("# joints=x\n1,2,3\n")
        with pytest.raises(ParseError, match="header"):
            D.load(tmp_path / "e.csv")


class TestWindows:
    def test_exact_fit(self, rng):
        assert len(D.windows(random_seq(rng, frames=20), 10, 10, 1)) == 1

    def test_count(self, rng):
        assert len(D.windows(random_seq(rng, frames=25), 10, 10, 1)) == 6

    def test_too_short_is_empty(self, rng):
        assert D.windows(random_seq(rng, frames=19), 10, 10) == []

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 40), st.integers(2, 6), st.integers(1, 6), st.integers(1, 7))
    def test_count_and_contiguity(self, frames, t_in, t_out, stride):
        seq = D.MotionSequence(np.arange(frames * 3, dtype=np.float32).reshape(frames, 1, 3))
        pairs = D.windows(seq, t_in, t_out, stride)
        starts = list(range(0, frames - t_in - t_out + 1, stride))
        assert len(pairs) == len(starts)
        for pair, s in zip(pairs, starts):
            frame_of = lambda arr: (arr[0, :, 0] / 3).astype(int).tolist()  # noqa: E731
            assert frame_of(pair.input) == list(range(s, s + t_in))
            assert frame_of(pair.target) == list(range(s + t_in, s + t_in + t_out))

    def test_bad_stride(self, rng):
        with pytest.raises(InputError):
            D.windows(random_seq(rng), 2, 2, 0)


class TestSynthesize:
    def test_static(self):
        seq = D.synthesize([100, 50], 10, amplitudes=[0, 0], frequencies=[1, 1], phases=[0.3, 0.2])
        np.testing.assert_array_equal(velocity(t64(seq.joint_major())).data, 0)

    def test_one_link_arc(self):
        L, f = 200.0, 0.5
        seq = D.synthesize([L], 30, fps=25, frequencies=[f], amplitudes=[np.pi / 2], phases=[0])
        t = np.arange(30) / 25
        theta = np.pi / 2 * np.sin(2 * np.pi * f * t)
        np.testing.assert_allclose(seq.coords[:, 0, 0], L * np.cos(theta), atol=1e-3)
        np.testing.assert_allclose(seq.coords[:, 0, 1], L * np.sin(theta), atol=1e-3)
        np.testing.assert_array_equal(seq.coords[:, 0, 2], 0)

    def test_three_links_against_symbolic_fk(self):
        lengths, freqs, amps, phases = [120, 90, 60], [0.4, 0.7, 1.1], [0.5, 0.3, 0.8], [0.1, 1.0, 2.0]
        seq = D.synthesize(lengths, 100, fps=25, frequencies=freqs, amplitudes=amps, phases=phases)
        t = sp.Symbol("t")
        angles = [a * sp.sin(2 * sp.pi * f * t + p) for a, f, p in zip(amps, freqs, phases)]
        for frame in (0, 17, 42, 63, 99):
            x = y = 0
            heading = 0
            for j in range(3):
                heading += angles[j]
                x += lengths[j] * sp.cos(heading)
                y += lengths[j] * sp.sin(heading)
                px = float(x.subs(t, sp.Rational(frame, 25)))
                py = float(y.subs(t, sp.Rational(frame, 25)))
                assert seq.coords[frame, j, 0] == pytest.approx(px, abs=1e-3)
                assert seq.coords[frame, j, 1] == pytest.approx(py, abs=1e-3)

    def test_second_difference_bound(self):
        A, f, fps = 0.1, 2.0, 25.0
        seq = D.synthesize([1.0], 200, fps=fps, frequencies=[f], amplitudes=[A], phases=[0.4])
        p = seq.coords[:, 0, :2].astype(np.float64)
        d2 = np.linalg.norm(p[2:] - 2 * p[1:-1] + p[:-2], axis=-1)
        assert d2.max() <= A * (2 * np.pi * f / fps) ** 2 * 1.1

    def test_deterministic_and_noisy(self):
        a = D.synthesize([100, 100], 50, noise_sd=2.0, seed=5)
        b = D.synthesize([100, 100], 50, noise_sd=2.0, seed=5)
        c = D.synthesize([100, 100], 50, noise_sd=2.0, seed=6)
        assert a.coords.tobytes() == b.coords.tobytes()
        assert a.coords.tobytes() != c.coords.tobytes()

    def test_bad_bone(self):
        with pytest.raises(InputError):
            D.synthesize([100, 0], 10)


class TestExport:
    def test_csv_round_trip(self, rng, tmp_path):
        pred = rng.standard_normal((4, 5, 3)) * 100
        D.export(pred, tmp_path / "p.csv")
        back = D.load(tmp_path / "p.csv")
        np.testing.assert_allclose(back.joint_major(), pred, atol=1e-4, rtol=1e-6)

    def test_single_joint_markers(self, rng, tmp_path):
        D.export(rng.standard_normal((1, 7, 3)), tmp_path / "p.svg")
        root = ET.parse(tmp_path / "p.svg").getroot()
        circles = [e for e in root.iter() if e.tag.endswith("circle")]
        assert len(circles) == 7

    def test_truth_overlay_well_formed(self, rng, tmp_path):
        pred = rng.standard_normal((3, 4, 3))
        D.export(pred, tmp_path / "p.svg", truth=pred + 0.1)
        root = ET.parse(tmp_path / "p.svg").getroot()
        groups = {g.get("class") for g in root if g.tag.endswith("g")}
        assert groups == {"pred", "truth"}
        lines = [e for e in root.iter() if e.tag.endswith("line")]
        assert len(lines) == 2 * 4 * 2  # two layers, four frames, two bones

    def test_viewport_hand_transform(self):
        pts = np.array([[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]], [[0.0, 5.0, 0.0], [4.0, -5.0, 0.0]]])
        vp = D.Viewport.fit(pts, cell=120.0, margin=10.0)
        # x in [0, 10], y in [-5, 5]: span 10, scale (120 - 20) / 10 = 10
        assert vp.scale == 10.0
        assert vp.map(0, 0.0, 5.0) == (10.0, 10.0)
        assert vp.map(1, 10.0, 0.0) == (120 + 10 + 100.0, 10 + 50.0)
        assert vp.map(2, 4.0, -5.0) == (240 + 10 + 40.0, 10 + 100.0)

    def test_unknown_edge(self, rng, tmp_path):
        with pytest.raises(InputError, match="edge"):
            D.export(rng.standard_normal((2, 3, 3)), tmp_path / "p.svg", edges=[(0, 2)])
