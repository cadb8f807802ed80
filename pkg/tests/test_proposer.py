import json
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mp1_conformance as conf
from voladapt.proposer import (
    HelloError,
    ProposalRequest,
    ProposerExitError,
    ProposerSession,
    RequestFailedError,
    SpawnError,
    VersionMismatchError,
    decode_request_line,
)
from voladapt.rle import RLEError, decode_rle, encode_rle
from voladapt.volume import BBox2D, Mask3D, SliceMask2D, save_volume

PY = sys.executable
MOCKS = [PY, "-m", "voladapt.mocks"]


def script(body):
    return [PY, "-c", body]


class TestRLE:
    def test_empty_and_full(self):
        empty = SliceMask2D(np.zeros((3, 4), dtype=np.uint8))
        assert encode_rle(empty) == [12]
        full = SliceMask2D(np.ones((3, 4), dtype=np.uint8))
        assert encode_rle(full) == [0, 12]

    def test_leading_foreground(self):
        a = np.array([[1, 1, 0, 1]], dtype=np.uint8)
        runs = encode_rle(SliceMask2D(a))
        assert runs == [0, 2, 1, 1]
        assert np.array_equal(decode_rle(runs, 1, 4).data, a)

    def test_sum_mismatch(self):
        with pytest.raises(RLEError):
            decode_rle([3, 2], 2, 3)

    def test_negative_run(self):
        with pytest.raises(RLEError):
            decode_rle([-1, 10], 3, 3)

    def test_500_random_roundtrips(self, rng):
        for _ in range(500):
            h = int(rng.integers(1, 12))
            w = int(rng.integers(1, 12))
            a = (rng.random((h, w)) < rng.uniform(0, 1)).astype(np.uint8)
            m = SliceMask2D(a)
            out = decode_rle(encode_rle(m), h, w)
            assert np.array_equal(out.data, a)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 10), st.integers(1, 10))
    def test_bijection_property(self, seed, h, w):
        g = np.random.default_rng(seed)
        a = (g.random((h, w)) < 0.5).astype(np.uint8)
        m = SliceMask2D(a)
        runs = encode_rle(m)
        assert sum(runs) == h * w
        assert np.array_equal(decode_rle(runs, h, w).data, a)


class TestRequestCodec:
    def test_line_roundtrip(self):
        req = conf.make_request(5, case="abc", j=3)
        back = decode_request_line(req.to_line())
        assert back.request_id == 5 and back.case_id == "abc" and back.slice_index == 3
        assert back.bbox == req.bbox
        assert np.array_equal(back.image, req.image)


class TestHandshake:
    def test_mock_handshake(self):
        with ProposerSession(MOCKS + ["constant", "--fill", "empty"]) as s:
            assert s.name == "constant"
            assert "box_prompt" in s.caps

    def test_garbage_hello(self):
        with pytest.raises(HelloError) as e:
            ProposerSession(script("print('garbage first line')"))
        assert "garbage" in e.value.line

    def test_version_mismatch(self):
        body = "import json; print(json.dumps({'proto': 'MP2', 'name': 'x', 'caps': []}))"
        with pytest.raises(VersionMismatchError):
            ProposerSession(script(body))

    def test_spawn_failure(self):
        with pytest.raises(SpawnError):
            ProposerSession(["/nonexistent/proposer-binary"])

    def test_child_exit_mid_request(self):
        body = ("import json,sys; print(json.dumps({'proto':'MP1','name':'x','caps':[]}),"
                "flush=True); sys.exit(0)")
        s = ProposerSession(script(body))
        with pytest.raises(ProposerExitError):
            s.propose(conf.make_request(1))

    def test_error_record_raises(self):
        body = ("import json,sys\n"
                "print(json.dumps({'proto':'MP1','name':'x','caps':[]}),flush=True)\n"
                "for line in sys.stdin:\n"
                "    rec=json.loads(line)\n"
                "    if rec.get('cmd')=='bye': break\n"
                "    print(json.dumps({'id':rec['id'],'error':'boom'}),flush=True)\n")
        with ProposerSession(script(body)) as s:
            with pytest.raises(RequestFailedError) as e:
                s.propose(conf.make_request(3))
            assert e.value.request_id == 3

    def test_out_of_order_responses(self):
        body = ("import json,sys\n"
                "print(json.dumps({'proto':'MP1','name':'swap','caps':['box_prompt']}),flush=True)\n"
                "buf=[]\n"
                "for line in sys.stdin:\n"
                "    rec=json.loads(line)\n"
                "    if rec.get('cmd')=='bye': break\n"
                "    buf.append(rec)\n"
                "    if len(buf)==2:\n"
                "        for r in reversed(buf):\n"
                "            print(json.dumps({'id':r['id'],'rle':[r['h']*r['w']],'conf':0.5}),flush=True)\n"
                "        buf=[]\n")
        with ProposerSession(script(body)) as s:
            reqs = [conf.make_request(s.new_request_id()) for _ in range(4)]
            resps = s.propose_many(reqs)
            assert [r.request_id for r in resps] == [r.request_id for r in reqs]


class TestMocks:
    @pytest.fixture
    def gt_file(self, tmp_path):
        a = np.zeros((4, 8, 8), dtype=np.uint8)
        a[0, 2:6, 2:6] = 1
        a[0, 0, 7] = 1  # outside the prompt box below
        path = tmp_path / "gt.vol"
        save_volume(Mask3D(a), path)
        return path

    def test_oracle_returns_gt_in_box(self, gt_file):
        cmd = MOCKS + ["oracle", "--gt", str(gt_file), "--conf", "0.9"]
        with ProposerSession(cmd) as s:
            resp = s.propose(conf.make_request(1, j=0, box=BBox2D(2, 5, 2, 5)))
            expected = np.zeros((8, 8), dtype=np.uint8)
            expected[2:6, 2:6] = 1  # (0,7) excluded: outside the box
            assert np.array_equal(resp.mask.data, expected)
            assert resp.confidence == 0.9

    def test_oracle_gt_dir_lookup(self, tmp_path):
        a = np.zeros((2, 4, 4), dtype=np.uint8)
        a[1, 1, 1] = 1
        (tmp_path / "gtd").mkdir()
        save_volume(Mask3D(a), tmp_path / "gtd" / "k1.vol")
        cmd = MOCKS + ["oracle", "--gt-dir", str(tmp_path / "gtd")]
        with ProposerSession(cmd) as s:
            resp = s.propose(conf.make_request(1, case="k1", j=1, h=4, w=4,
                                               box=BBox2D(0, 3, 0, 3)))
            assert resp.mask.data[1, 1] == 1 and resp.mask.data.sum() == 1

    def test_noise_deterministic_per_seed(self):
        cmd = MOCKS + ["noise", "--seed", "7", "--density", "0.3"]
        masks = []
        for _ in range(2):
            with ProposerSession(cmd) as s:
                resp = s.propose(conf.make_request(1, case="n", j=2))
                masks.append(resp.mask.data.copy())
        assert np.array_equal(masks[0], masks[1])
        with ProposerSession(MOCKS + ["noise", "--seed", "8", "--density", "0.3"]) as s:
            other = s.propose(conf.make_request(1, case="n", j=2)).mask.data
        assert not np.array_equal(masks[0], other)

    def test_noise_confined_to_box(self):
        cmd = MOCKS + ["noise", "--seed", "1", "--density", "0.9"]
        with ProposerSession(cmd) as s:
            resp = s.propose(conf.make_request(1, box=BBox2D(2, 3, 2, 3)))
        outside = resp.mask.data.copy()
        outside[2:4, 2:4] = 0
        assert not outside.any()

    def test_constant_full_fills_box(self):
        with ProposerSession(MOCKS + ["constant", "--fill", "full", "--conf", "0.8"]) as s:
            resp = s.propose(conf.make_request(1, box=BBox2D(1, 2, 3, 4)))
        expected = np.zeros((8, 8), dtype=np.uint8)
        expected[1:3, 3:5] = 1
        assert np.array_equal(resp.mask.data, expected)

    def test_mixed_routes_by_prefix(self, tmp_path):
        a = np.zeros((2, 8, 8), dtype=np.uint8)
        a[0, 1:5, 1:5] = 1
        (tmp_path / "gtd").mkdir()
        save_volume(Mask3D(a), tmp_path / "gtd" / "oracle_1.vol")
        cmd = MOCKS + ["mixed", "--gt-dir", str(tmp_path / "gtd"),
                       "--conf-oracle", "0.95", "--conf-noise", "0.5", "--density", "0.1"]
        with ProposerSession(cmd) as s:
            ora = s.propose(conf.make_request(1, case="oracle_1", j=0, box=BBox2D(1, 4, 1, 4)))
            noi = s.propose(conf.make_request(2, case="noise_1", j=0, box=BBox2D(1, 4, 1, 4)))
        assert ora.confidence == 0.95 and noi.confidence == 0.5
        assert ora.mask.data[1:5, 1:5].sum() == 16


@pytest.mark.parametrize("command", [
    MOCKS + ["constant", "--fill", "full"],
    MOCKS + ["constant", "--fill", "empty"],
    MOCKS + ["noise", "--seed", "3", "--density", "0.2"],
], ids=["constant-full", "constant-empty", "noise"])
def test_mp1_conformance_suite(command):
    conf.run_all(command)
