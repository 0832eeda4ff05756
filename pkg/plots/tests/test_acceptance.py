"""Acceptance criterion 10: all three figure kinds render (golden-checked on
synthetic CSVs in test_figures), and the recomputed misfit annotation agrees
with the solver's own misfit report to 1e-10 relative."""

import csv

import pytest

from tetradg_plots import figures

from test_figures import GOLDEN, _render_all


def _report(ok, text):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion 10: {text}")
    assert ok, text


def test_criterion_10_plot_suite(tmp_path):
    tetradg = pytest.importorskip("tetradg")
    from tetradg.driver import RunConfig, preprocess, report, run
    from tetradg.equations import Material
    from tetradg.mesh import layered_cube_mesh, write_msh

    # golden-checked rendering of all three kinds from synthetic CSVs
    outs = _render_all(tmp_path, tag="acc")
    golden_ok = all(
        (GOLDEN / f"{kind}.png").exists()
        and outs[kind].read_bytes() == (GOLDEN / f"{kind}.png").read_bytes()
        for kind in outs
    )

    # a real solver run pair: LTS vs GTS seismograms plus the solver's own
    # misfit report; the figure recomputes the same numbers
    slow = Material.from_velocities(rho=1.0, vp=2.0, vs=1.0)
    fast = Material.from_velocities(rho=1.0, vp=4.2, vs=2.1)
    mesh = layered_cube_mesh(2, slow, fast, boundary="free-surface")
    write_msh(mesh, tmp_path / "mesh.msh", tmp_path / "materials.csv")
    common = dict(
        mesh=str(tmp_path / "mesh.msh"),
        materials=str(tmp_path / "materials.csv"),
        order=2,
        partitions=2,
        t_end=0.3,
        cfl=0.5,
        receiver_dt=0.01,
        sources=[
            dict(
                location=[0.3, 0.55, 0.45],
                moment=[1.0, 1.0, 1.0, 0.0, 0.0, 0.0],
                series=dict(kind="ricker", f0=5.0, dt=0.004),
            )
        ],
        receivers=[[0.8, 0.6, 0.55]],
    )
    cfg_lts = RunConfig(output=str(tmp_path / "lts"), nc=2, **common)
    preprocess(cfg_lts)
    run(cfg_lts)
    cfg_gts = RunConfig(output=str(tmp_path / "gts"), nc=1, **common)
    preprocess(cfg_gts)
    run(cfg_gts)
    report(tmp_path / "lts", tmp_path / "gts", tmp_path / "misfit.csv")

    primary = {}
    with open(tmp_path / "misfit.csv", newline="") as fh:
        for rec in list(csv.reader(fh))[1:]:
            primary[rec[1]] = float(rec[2])

    out = figures.plot_seismogram_compare(
        tmp_path / "lts" / "receivers" / "rec_000_s00.csv",
        tmp_path / "gts" / "receivers" / "rec_000_s00.csv",
        tmp_path / "seis_real.png",
    )
    annotation = dict(zip("uvw", out["misfit"]))
    worst = max(
        abs(annotation[ch] - primary[ch]) / max(primary[ch], 1e-300) for ch in "uvw"
    )
    misfit_ok = worst <= 1e-10

    # the real clustering and partition reports render too
    figures.plot_cluster_density(
        tmp_path / "lts" / "clustering_report.csv", tmp_path / "dens_real.png"
    )
    figures.plot_partition_loads(
        tmp_path / "lts" / "partition_report.csv", tmp_path / "loads_real.png"
    )
    real_ok = (tmp_path / "dens_real.png").exists() and (tmp_path / "loads_real.png").exists()

    _report(
        golden_ok and misfit_ok and real_ok,
        f"three figure kinds golden-checked ({golden_ok}); recomputed misfit vs "
        f"primary report worst rel dev {worst:.2e} <= 1e-10; real report CSVs render ({real_ok})",
    )
