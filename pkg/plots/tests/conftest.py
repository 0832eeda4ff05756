import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def write_seismogram(path, times, data):
    with open(path, "w") as fh:
        fh.write("time,u,v,w\n")
        for t, row in zip(times, data):
            fh.write(f"{t:.12g}," + ",".join(f"{v:.17e}" for v in row) + "\n")


def write_cluster_report(path, lam, dt_min, dt_max, rows, hist=None):
    """rows: list of (cluster, count, lower, upper); hist: (edges, counts)."""
    with open(path, "w") as fh:
        fh.write(f"# lambda,{lam:.2f}\n")
        fh.write(f"# dt_min,{dt_min:.17e}\n")
        fh.write(f"# dt_max,{dt_max:.17e}\n")
        fh.write("# theoretical_speedup,1.500000\n")
        fh.write("cluster,count,dt_lower,dt_upper\n")
        for c, n, lo, hi in rows:
            fh.write(f"{c},{n},{lo:.17e},{hi:.17e}\n")
        if hist is not None:
            edges, counts = hist
            fh.write("histogram\nbin_lower,bin_upper,count\n")
            for lo, hi, n in zip(edges[:-1], edges[1:], counts):
                fh.write(f"{lo:.17e},{hi:.17e},{n}\n")


def write_partition_report(path, counts):
    counts = np.asarray(counts)
    with open(path, "w") as fh:
        fh.write("partition," + ",".join(f"c{l + 1}" for l in range(counts.shape[1])) + ",total\n")
        for pid, row in enumerate(counts):
            fh.write(f"{pid}," + ",".join(str(int(x)) for x in row) + f",{int(row.sum())}\n")


@pytest.fixture
def sine_pair(tmp_path):
    times = np.arange(0, 2.0, 0.01)
    ref = np.stack(
        [np.sin(2 * np.pi * times), 0.5 * np.cos(2 * np.pi * times), np.sin(4 * np.pi * times)],
        axis=1,
    )
    run = np.stack(
        [np.sin(2 * np.pi * (times - 0.02)), 0.5 * np.cos(2 * np.pi * times),
         np.sin(4 * np.pi * (times - 0.01))],
        axis=1,
    )
    ref_path = tmp_path / "ref.csv"
    run_path = tmp_path / "run.csv"
    write_seismogram(ref_path, times, ref)
    write_seismogram(run_path, times, run)
    return run_path, ref_path, times, run, ref
