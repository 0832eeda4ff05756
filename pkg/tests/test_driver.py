import json

import numpy as np
import pytest
import yaml

from tetradg import cli, driver
from tetradg.equations import Material
from tetradg.mesh import cube_mesh, layered_cube_mesh, write_msh


@pytest.fixture
def layered_files(tmp_path):
    slow = Material.from_velocities(rho=1.0, vp=2.0, vs=1.0)
    fast = Material.from_velocities(rho=1.0, vp=4.2, vs=2.1)
    mesh = layered_cube_mesh(2, slow, fast, boundary="free-surface")
    write_msh(mesh, tmp_path / "mesh.msh", tmp_path / "materials.csv")
    return tmp_path


def base_config(tmp_path, **overrides):
    cfg = dict(
        mesh=str(tmp_path / "mesh.msh"),
        materials=str(tmp_path / "materials.csv"),
        output=str(tmp_path / "out"),
        order=2,
        precision=64,
        mechanisms=0,
        nc=2,
        lambda_mode="fixed",
        lam=1.0,
        partitions=2,
        width=1,
        t_end=0.2,
        cfl=0.5,
        receiver_dt=0.02,
        sources=[
            dict(
                location=[0.3, 0.55, 0.45],
                moment=[1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
                series=dict(kind="ricker", f0=5.0, dt=0.004),
            )
        ],
        receivers=[[0.8, 0.6, 0.55]],
    )
    cfg.update(overrides)
    return driver.RunConfig(**cfg)


class TestConfig:
    def test_invalid_order(self, layered_files):
        with pytest.raises(driver.ConfigError):
            base_config(layered_files, order=7)

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("mesh: a\nmaterials: b\noutput: c\nbogus_key: 1\n")
        with pytest.raises(driver.ConfigError, match="bogus_key"):
            driver.RunConfig.from_yaml(path)

    def test_yaml_overrides(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("mesh: a\nmaterials: b\noutput: c\norder: 3\nt_end: 0.5\n")
        cfg = driver.RunConfig.from_yaml(path, {"order": 4, "output": None})
        assert cfg.order == 4 and cfg.t_end == 0.5 and cfg.output == "c"


class TestPreprocess:
    def test_single_cluster_report(self, layered_files):
        cfg = base_config(layered_files, nc=1, partitions=1)
        manifest = driver.preprocess(cfg)
        assert manifest["cluster_counts"] == [48]
        assert manifest["theoretical_speedup"] == pytest.approx(1.0)
        report = (layered_files / "out" / "clustering_report.csv").read_text()
        assert "1,48," in report

    def test_partition_counts_conserved(self, tmp_path):
        rock = Material.from_velocities(rho=1.0, vp=2.0, vs=1.0)
        mesh = cube_mesh(1, rock, boundary="outflow")
        write_msh(mesh, tmp_path / "mesh.msh", tmp_path / "materials.csv")
        cfg = base_config(tmp_path, nc=1, partitions=2, sources=[], receivers=[])
        manifest = driver.preprocess(cfg)
        from tetradg.partition_comm import read_partition_file

        totals = sum(
            read_partition_file(tmp_path / "out" / rel).n_local
            for rel in manifest["partition_files"]
        )
        assert totals == 6

    def test_lambda_scan_never_below_fixed(self, layered_files):
        fixed = driver.preprocess(base_config(layered_files, lambda_mode="fixed"))
        scanned = driver.preprocess(
            base_config(layered_files, lambda_mode="optimize",
                        output=str(layered_files / "out_opt"))
        )
        assert 0.51 <= scanned["lambda"] <= 1.0
        assert scanned["theoretical_speedup"] >= fixed["theoretical_speedup"] - 1e-12
        assert scanned["config"]["lam"] == scanned["lambda"]

    def test_normalization_loss_reported(self, layered_files):
        manifest = driver.preprocess(base_config(layered_files))
        assert "normalization_moved_elements" in manifest
        assert 0.0 <= manifest["normalization_speedup_loss"] < 1.0

    def test_deterministic_byte_for_byte(self, layered_files):
        cfg = base_config(layered_files)
        driver.preprocess(cfg)
        first = {
            p.name: p.read_bytes()
            for p in (layered_files / "out" / "partitions").iterdir()
        }
        first["manifest"] = (layered_files / "out" / "manifest.json").read_bytes()
        driver.preprocess(cfg)
        again = {
            p.name: p.read_bytes()
            for p in (layered_files / "out" / "partitions").iterdir()
        }
        again["manifest"] = (layered_files / "out" / "manifest.json").read_bytes()
        assert first == again


class TestRun:
    def test_zero_sources_zero_seismograms(self, layered_files):
        cfg = base_config(layered_files, sources=[], t_end=0.1)
        driver.preprocess(cfg)
        driver.run(cfg)
        data = np.genfromtxt(
            layered_files / "out" / "receivers" / "rec_000_s00.csv",
            delimiter=",", skip_header=1,
        )
        assert np.abs(data[:, 1:]).max() == 0.0

    def test_version_error_on_mismatch(self, layered_files):
        cfg = base_config(layered_files)
        driver.preprocess(cfg)
        bad = base_config(layered_files, order=3)
        with pytest.raises(driver.VersionError):
            driver.run(bad)

    def test_mode_composition(self, layered_files, tmp_path):
        # preprocess-then-run equals a fresh preprocess+run in a second dir
        cfg_a = base_config(layered_files)
        driver.preprocess(cfg_a)
        summary_a = driver.run(cfg_a)
        out_b = layered_files / "out_b"
        cfg_b = base_config(layered_files, output=str(out_b))
        driver.preprocess(cfg_b)
        summary_b = driver.run(cfg_b)
        a = (layered_files / "out" / "receivers" / "rec_000_s00.csv").read_bytes()
        b = (out_b / "receivers" / "rec_000_s00.csv").read_bytes()
        assert a == b
        assert summary_a["element_updates_lts"] == summary_b["element_updates_lts"]

    def test_fused_run_emits_one_set_per_slot(self, layered_files):
        width = 16
        scales = [1.0, 2.0] + [0.5 + 0.1 * i for i in range(14)]
        src = dict(
            location=[0.3, 0.55, 0.45],
            moment=[1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            series=dict(kind="ricker", f0=5.0, dt=0.004, scale=scales),
        )
        cfg = base_config(layered_files, width=width, sources=[src], t_end=0.1)
        driver.preprocess(cfg)
        summary = driver.run(cfg)
        files = sorted((layered_files / "out" / "receivers").glob("rec_000_s*.csv"))
        assert len(files) == width
        base = np.genfromtxt(files[0], delimiter=",", skip_header=1)
        doubled = np.genfromtxt(files[1], delimiter=",", skip_header=1)
        assert np.allclose(doubled[:, 1:], 2.0 * base[:, 1:], rtol=1e-10, atol=1e-14)

    def test_summary_bookkeeping(self, layered_files):
        cfg = base_config(layered_files, t_end=0.3)
        driver.preprocess(cfg)
        summary = driver.run(cfg)
        assert summary["element_updates_lts"] > 0
        assert summary["realized_speedup"] == pytest.approx(
            summary["element_updates_gts_equivalent"] / summary["element_updates_lts"]
        )
        assert set(summary["per_cluster_steps"]) == {"1", "2"}
        assert summary["wall_time_s"] > 0


class TestCli:
    def test_end_to_end(self, layered_files, capsys):
        cfg_path = layered_files / "run.yaml"
        cfg = base_config(layered_files)
        data = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
        with open(cfg_path, "w") as fh:
            yaml.dump(data, fh)
        assert cli.main(["preprocess", "--config", str(cfg_path)]) == 0
        assert cli.main(["run", "--config", str(cfg_path)]) == 0
        out = capsys.readouterr().out
        assert "realized_speedup" in out
        # report a run against itself: all misfits identically zero
        misfit_path = layered_files / "misfit.csv"
        assert cli.main([
            "report", "--run-dir", str(layered_files / "out"),
            "--reference-dir", str(layered_files / "out"),
            "--out", str(misfit_path),
        ]) == 0
        rows = misfit_path.read_text().splitlines()[1:]
        assert rows and all(float(r.split(",")[2]) == 0.0 for r in rows)

    def test_bad_config_exit_code(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.yaml"
        cfg_path.write_text("mesh: missing.msh\nmaterials: m.csv\noutput: o\nbogus: 1\n")
        assert cli.main(["preprocess", "--config", str(cfg_path)]) == 2
        assert "error" in capsys.readouterr().err
