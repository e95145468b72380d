import csv

import numpy as np
import pytest
from scipy.spatial import cKDTree

from semsphere.cli import EXIT_INPUT, EXIT_OK, RunConfig, main
from semsphere.errors import InvalidConfig
from semsphere.retrieval import load_descriptors
from semsphere.scene import load_cloud, load_poses

SMALL_SPEC = """\
seed = 3
n_places = 4
points_per_object = 80
ground_points = 400
"""

TINY_RUN = """\
n = 8
bandwidths = 4,4
channels = 2,3,4
clusters = 2
branch_dim = 5
epochs = 1
n_neg = 1
n_rot = 2
views = 1
"""


def run(tmp, *argv, config=None):
    args = ["--out", str(tmp)]
    if config:
        args += ["--config", str(config)]
    return main(args + list(argv))


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.txt"
    spec.write_text(SMALL_SPEC)
    assert run(root / "data", "synth", str(spec)) == EXIT_OK
    assert run(root / "m", "map", str(root / "data")) == EXIT_OK
    return root


def read_summary(path):
    return dict(line.split() for line in path.read_text().splitlines())


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(InvalidConfig):
            RunConfig({"no_such_key": "1"})

    def test_seed_overrides_everything(self):
        cfg = RunConfig({"lr": "0.5"}, seed=9)
        assert cfg.scenario.seed == cfg.map.seed == cfg.loss.seed == 9
        assert cfg.loss.lr == 0.5
        assert cfg.float_list("delta_t") == [0.0, 2.0, 4.0, 6.0, 8.0]

    def test_unknown_key_exit_code(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("frobnicate = 2\n")
        assert run(tmp_path / "o", "gradcheck", config=bad) == EXIT_INPUT

    def test_bad_flag(self, tmp_path):
        assert main(["--out", str(tmp_path), "synth", "--bogus"]) == EXIT_INPUT


class TestSynth:
    def test_outputs(self, dataset):
        data = dataset / "data"
        places = (data / "places.txt").read_text().splitlines()
        assert len(places) == 4
        stamps, poses = load_poses(data / "poses.txt")
        assert len(poses) == len(list((data / "frames").glob("*.psem"))) == 12
        assert "np.float64" not in (data / "places.txt").read_text()
        assert "command = synth" in (data / "resolved_config.txt").read_text()

    def test_deterministic(self, dataset, tmp_path):
        assert run(tmp_path, "synth", str(dataset / "spec.txt")) == EXIT_OK
        for name in ("places.txt", "poses.txt", "scenario.txt"):
            assert (tmp_path / name).read_bytes() == (dataset / "data" / name).read_bytes()
        for f in (dataset / "data" / "frames").iterdir():
            assert (tmp_path / "frames" / f.name).read_bytes() == f.read_bytes()

    def test_malformed_spec(self, tmp_path):
        spec = tmp_path / "spec.txt"
        spec.write_text("n_places = 0\n")
        assert run(tmp_path / "o", "synth", str(spec)) == EXIT_INPUT


class TestMap:
    def test_not_a_dataset(self, tmp_path):
        assert run(tmp_path / "o", "map", str(tmp_path)) == EXIT_INPUT

    def test_index(self, dataset):
        lines = (dataset / "m" / "maps" / "index.txt").read_text().splitlines()
        assert [l.split()[0] for l in lines] == [f"place_{k:04d}" for k in range(4)]

    def test_raw_accumulation_matches_oracle(self, dataset, tmp_path):
        """Without the occupancy map the local map is the frames expressed in the last frame."""
        assert run(tmp_path, "map", str(dataset / "data"), "--no-dom") == EXIT_OK
        data = dataset / "data"
        _, poses = load_poses(data / "poses.txt")
        line = (data / "places.txt").read_text().splitlines()[1]
        idx = [int(i) for i in line.split()[4].split(",")]
        last = poses[idx[-1]]
        pts, labels = [], []
        for i in idx:
            c = load_cloud(data / "frames" / f"frame_{i:05d}.psem")
            pts.append(last.inverse().compose(poses[i]).apply(c.points))
            labels.append(c.labels)
        pts, labels = np.concatenate(pts), np.concatenate(labels)
        keep = np.linalg.norm(pts, axis=1) <= 30.0
        got = load_cloud(tmp_path / "maps" / "place_0001.psem")
        np.testing.assert_allclose(got.points, pts[keep], atol=1e-9)
        np.testing.assert_array_equal(got.labels, labels[keep])

    def test_occupancy_map_is_near_raw_points(self, dataset, tmp_path):
        """With exact odometry every occupied leaf sits on an observed static point."""
        assert run(tmp_path, "map", str(dataset / "data"), "--no-dom") == EXIT_OK
        raw = load_cloud(tmp_path / "maps" / "place_0002.psem")
        dom = load_cloud(dataset / "m" / "maps" / "place_0002.psem")
        assert len(dom) > 0
        dist, _ = cKDTree(raw.points).query(dom.points)
        assert np.all(dist <= 0.25 * np.sqrt(3) / 2 + 1e-9)


class TestRetrievalCommands:
    def test_self_retrieval(self, dataset, tmp_path):
        assert run(tmp_path, "embed", str(dataset / "m" / "maps")) == EXIT_OK
        desc = tmp_path / "descriptors.json"
        assert run(tmp_path, "index", str(desc)) == EXIT_OK
        assert run(tmp_path, "query", str(tmp_path / "index.json"), str(desc), "-k", "2") == EXIT_OK
        with open(tmp_path / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 8
        assert all(r["query"] == r["ref"] for r in rows if r["rank"] == "1")
        assert run(tmp_path, "eval", str(tmp_path / "index.json"), str(desc)) == EXIT_OK
        summary = read_summary(tmp_path / "summary.txt")
        assert float(summary["recall@1"]) == 1.0
        assert (tmp_path / "pr_curve.svg").exists()

    def test_seqmatch_too_small(self, dataset, tmp_path):
        assert run(tmp_path, "embed", str(dataset / "m" / "maps")) == EXIT_OK
        desc = str(tmp_path / "descriptors.json")
        assert run(tmp_path, "seqmatch", desc, desc) == EXIT_INPUT

    def test_gradcheck(self, tmp_path):
        assert run(tmp_path, "gradcheck") == EXIT_OK
        with open(tmp_path / "gradcheck.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert rows and all(float(r["max_rel_error"]) < 1e-4 for r in rows)

    def test_sweep_rows(self, dataset, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text("delta_t = 0,4\ndelta_theta = 0,90,180\nn = 16\nbandwidths = 8,4\n")
        assert run(tmp_path, "sweep", str(dataset / "data"), config=cfg) == EXIT_OK
        with open(tmp_path / "surface.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) - 1 == 2 * 3


class TestTrainCommand:
    def test_tiny_training(self, dataset, tmp_path):
        cfg = tmp_path / "c.txt"
        cfg.write_text(TINY_RUN)
        assert run(tmp_path / "m", "map", str(dataset / "data"), config=cfg) == EXIT_OK
        maps = tmp_path / "m" / "maps"
        assert len((maps / "index.txt").read_text().splitlines()) == 8
        assert run(tmp_path / "t", "train", str(maps), config=cfg) == EXIT_OK
        for name in ("model.json", "epoch_log.csv", "loss.svg"):
            assert (tmp_path / "t" / name).exists()
        assert run(tmp_path / "e", "embed", str(maps), "--model", str(tmp_path / "t" / "model.json")) == EXIT_OK
        matrix, ids, _ = load_descriptors(tmp_path / "e" / "descriptors.json")
        assert matrix.shape == (8, 15)
        np.testing.assert_allclose(np.linalg.norm(matrix, axis=1), 1.0, atol=1e-9)
