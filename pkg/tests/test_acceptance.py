"""Acceptance criteria 1-8.

Each test prints one ``PASS``/``FAIL`` line (collected in the terminal summary
by ``conftest.py``).  Run on its own with::

    pytest tests/test_acceptance.py -v
"""

import json
import math
import resource
import subprocess
import sys
import time

import numpy as np
import pytest

import oracles
from conftest import HOTLINE, MOBILE, make_dataset, make_field, event
from urbangrid import relevance
from urbangrid.aggregation import build_field
from urbangrid.category_mi import (
    ContingencyTable,
    cooccurrence_table,
    entropy,
    mutual_information,
    normalized_mutual_information,
    relevance_matrix,
)
from urbangrid.cli import main
from urbangrid.relevance import (
    global_spatial_relevance,
    global_temporal_relevance,
    pair_spatial_relevance,
    temporal_self_relevance,
)
from urbangrid.synthgen import CategorySpec, Coupling, Hotspot, config_for, generate, window_of

RESULTS = []


class Criterion:
    """Context manager that records one pass/fail line per criterion."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.detail = ""
        self.start = time.perf_counter()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number} {status}: {self.title} ({elapsed:.1f} s) {self.detail}".rstrip()
        if exc_type is not None:
            line += f" -- {exc_type.__name__}: {exc}"
        RESULTS.append(line)
        print(line)
        return False


def close(a, b, rel=1e-9):
    if a is None or b is None:
        return a is None and b is None
    # exact zeros from cancellation differ from the oracle only by rounding noise
    return math.isclose(a, b, rel_tol=rel, abs_tol=1e-12)


# ---------------------------------------------------------------------------


def random_instance(rng):
    n = int(rng.integers(1, 6))
    t = int(rng.integers(2, 13))
    counts = rng.poisson(rng.uniform(0.3, 4.0), size=(n, t))
    coords = [(31.0 + 0.04 * rng.random(), 121.0 + 0.04 * rng.random()) for _ in range(n)]
    n_rows, n_cols = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    events = []
    for i in range(int(rng.integers(5, 60))):
        cell = f"c{int(rng.integers(0, n))}"
        if rng.random() < 0.5:
            events.append((cell, MOBILE, f"R{int(rng.integers(0, n_rows))}"))
        else:
            events.append((cell, HOTLINE, f"K{int(rng.integers(0, n_cols))}"))
    return counts, coords, events


def test_criterion_1_oracle_equivalence():
    with Criterion(1, "oracle equivalence on random small instances") as c:
        rng = np.random.default_rng(2015)
        start = time.perf_counter()
        checked = 0
        for _ in range(150):
            counts, coords, events = random_instance(rng)
            n, t = counts.shape
            rows = counts.tolist()
            f = make_field(counts, coords)
            for i in range(n):
                for lag in range(t):
                    assert close(temporal_self_relevance(f, i, lag), oracles.self_relevance(rows[i], lag))
                for j in range(n):
                    assert close(pair_spatial_relevance(f, i, j), oracles.pair_relevance(rows[i], rows[j]))
            for norm in (False, True):
                curve = global_temporal_relevance(f, t - 1, norm)
                expected = oracles.global_temporal(rows, t - 1, norm)
                assert all(close(p.score, e) for p, e in zip(curve.points, expected))
                curve = global_spatial_relevance(f, 2000.0, 8000.0, norm)
                expected = oracles.global_spatial(rows, coords, 2000.0, 8000.0, norm)
                assert all(close(p.score, e) for p, (e, _) in zip(curve.points, expected))

            sources = {s for _, s, _ in events}
            if sources != {MOBILE, HOTLINE}:
                continue
            ds = make_dataset([event(f"e{k}", cell_id=cell, source=s, category=cat, lat=31 + int(cell[1:]) * 1e-3)
                               for k, (cell, s, cat) in enumerate(events)])
            for mode in ("product", "min", "presence"):
                table = cooccurrence_table(ds, MOBILE, HOTLINE, mode)
                ref = oracles.cooccurrence(events, MOBILE, HOTLINE, list(table.row_labels), list(table.col_labels), mode)
                assert table.weights.tolist() == ref
                if table.empty:
                    continue
                total = sum(map(sum, ref))
                p_rows = [sum(r) / total for r in ref]
                assert close(entropy(table.row_marginal / table.total), oracles.entropy(p_rows))
                assert close(mutual_information(table), oracles.mutual_information(ref))
                assert close(normalized_mutual_information(table), min(1.0, max(0.0, oracles.nmi(ref))))
            checked += 1
        elapsed = time.perf_counter() - start
        c.detail = f"[{checked} instances with both sources, 150 field instances]"
        assert checked >= 100
        assert elapsed < 10.0


def test_criterion_2_mi_invariants():
    with Criterion(2, "MI/NMI invariant suite") as c:
        rng = np.random.default_rng(7)
        for _ in range(500):
            r, k = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            w = rng.integers(0, 40, size=(r, k)) * (rng.random((r, k)) < 0.7)
            if w.sum() == 0:
                continue
            table = ContingencyTable.from_array(w)
            mi = mutual_information(table)
            nmi = normalized_mutual_information(table)
            assert mi >= -1e-12
            assert -1e-12 <= nmi <= 1 + 1e-12
            assert mutual_information(table.transpose()) == mi
            assert normalized_mutual_information(table.transpose()) == nmi
            assert abs(mutual_information(table, "cardinality") - mi) <= 1e-12
            u, v = rng.integers(1, 20, size=r), rng.integers(1, 20, size=k)
            assert mutual_information(np.outer(u, v)) < 1e-12
        for size in range(2, 10):
            d = np.diag(rng.integers(1, 100, size=size))
            assert abs(normalized_mutual_information(d) - 1.0) <= 1e-12
        c.detail = "[500 random tables]"


def test_criterion_3_seasonality():
    with Criterion(3, "seasonality: local maximum near lag 365") as c:
        cfg = config_for(7, 200_000, [CategorySpec("Greening", seasonal_amplitude=0.8, seasonal_period=365)],
                         window=window_of("2015-01-01T00:00:00+00:00", 600),
                         hotspots=(Hotspot(31.23, 121.47, 3000.0),))
        curve = global_temporal_relevance(build_field(generate(cfg), "day"), 375, normalize=True)
        peaks = [k for k in curve.local_maxima() if abs(curve.points[k].coordinate - 365) <= 5]
        s = curve.scores
        c.detail = f"[peaks near 365: {peaks}, C(300)={s[300]:.5f}]"
        assert peaks
        assert max(s[k] for k in peaks) > s[300]
        assert time.perf_counter() - c.start < 30


def _spatial_fixture(twin, seed=1):
    lat0, lon0 = 31.23, 121.47
    dlon = math.degrees(50_000 / (6_371_000 * math.cos(math.radians(lat0))))
    hotspots = [Hotspot(lat0, lon0, 3000.0, 1.0, "a")]
    if twin:
        hotspots += [Hotspot(lat0 + 0.35, lon0 - 0.1, 15000.0, 1.0), Hotspot(lat0, lon0 + dlon, 3000.0, 1.0, "a")]
    cfg = config_for(seed, 100_000, ["Resident Area Mgmt."], window=window_of("2015-01-01T00:00:00+00:00", 365),
                     hotspots=tuple(hotspots), cell_size=1000.0, center=(lat0, lon0))
    return build_field(generate(cfg), "day")


def test_criterion_4_spatial_decay_and_twin_peak():
    with Criterion(4, "spatial decay and twin-hotspot peak") as c:
        single = global_spatial_relevance(_spatial_fixture(False), 1000.0, 30_000.0, normalize=True)
        s = single.scores
        assert s[0] > s[10]
        twin = global_spatial_relevance(_spatial_fixture(True), 1000.0, 70_000.0, normalize=True)
        k50 = int(50_000 // 1000)
        maxima = twin.local_maxima()
        c.detail = f"[bin0={s[0]:.4f} > 10-11km={s[10]:.4f}; twin maxima at {[twin.points[k].coordinate for k in maxima]} m]"
        assert twin.bins[k50].lower <= 50_000 < twin.bins[k50].upper
        assert k50 in maxima
        assert time.perf_counter() - c.start < 30


REPORTED_MOBILE = [("Environment, City Appearance", 42), ("Street Order", 24), ("Public Facility", 4),
                 ("Greening", 2), ("Road, Traffic", 2), ("Resident Area Mgmt.", 1), ("Others (mobile)", 4)]
REPORTED_HOTLINE = [("Greening, City Appearance, Construction, Housing, Environment, Rivers, Public Transportation", 17),
                  ("Management of human resource related affairs", 1), ("Others (hotline)", 4)]


def test_criterion_5_share_pipeline(tmp_path):
    with Criterion(5, "source and category shares through the summary command") as c:
        cats = ([{"name": n, "weight": w, "source": "MobileDevice"} for n, w in REPORTED_MOBILE]
                + [{"name": n, "weight": w, "source": "Hotline"} for n, w in REPORTED_HOTLINE])
        cfg = {"seed": 31, "n_events": 100_000, "source_mix": 0.79, "categories": cats,
               "window": ["2015-01-01T00:00:00+00:00", "2016-09-01T00:00:00+00:00"]}
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        assert main(["synth", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "syn")]) == 0
        assert main(["summary", "--input", str(tmp_path / "syn"), "--out", str(tmp_path / "sum")]) == 0
        report = json.loads((tmp_path / "sum" / "summary.json").read_text())
        shares = {s["source"]: s["percent_of_total"] for s in report["sources"]}
        rows = {r["category"]: r["percent_of_total"] for r in report["rows"]}
        lead = rows["Environment, City Appearance"]
        c.detail = f"[mobile {shares['MobileDevice']:.2f}%, hotline {shares['Hotline']:.2f}%, lead {lead:.2f}%]"
        assert abs(shares["MobileDevice"] - 79) <= 1 and abs(shares["Hotline"] - 21) <= 1
        assert abs(lead - 42) <= 1
        for name, w in REPORTED_MOBILE:
            assert abs(rows[name] - 79 * w / 79) <= 1
        for name, w in REPORTED_HOTLINE:
            assert abs(rows[name] - 21 * w / 22) <= 1
        assert time.perf_counter() - c.start < 10


COUPLED_ROWS = ["Underground", "Greening", "Street Order", "Environment", "Public Facility", "Road, Traffic"]
COUPLED_COLS = ["Construction", "Police", "Housing", "Rivers", "Transport", "Human Resources"]


def test_criterion_6_coupling_detection():
    with Criterion(6, "planted coupled pair is the matrix argmax in every mode") as c:
        cats = ([CategorySpec(n, w, MOBILE) for n, w in zip(COUPLED_ROWS, [5, 10, 20, 30, 8, 6])]
                + [CategorySpec(n, w, HOTLINE) for n, w in zip(COUPLED_COLS, [6, 5, 10, 4, 3, 2])])
        cfg = config_for(1, 60_000, cats, couplings=(Coupling("Underground", "Construction", 0.3),),
                         hotspots=(Hotspot(31.23, 121.47, 4000.0, 2.0), Hotspot(31.3, 121.6, 6000.0, 1.0)))
        ds = generate(cfg)
        found = {}
        for mode in ("product", "min", "presence"):
            m = relevance_matrix(ds, MOBILE, HOTLINE, mode)
            assert m.scores.shape == (6, 6)
            found[mode] = m.argmax()
        c.detail = f"[{found}]"
        assert all(v == ("Underground", "Construction") for v in found.values())
        assert time.perf_counter() - c.start < 30


SCALE_RECORDS = 1_131_423


def test_criterion_7_scale(tmp_path):
    with Criterion(7, f"full pipeline on {SCALE_RECORDS:,} records") as c:
        cats = ([{"name": n, "weight": w, "source": "MobileDevice",
                  "seasonal_amplitude": 0.3, "level_shift": {"week": 60, "factor": 2.0}}
                 for n, w in REPORTED_MOBILE]
                + [{"name": n, "weight": w, "source": "Hotline", "seasonal_amplitude": 0.2} for n, w in REPORTED_HOTLINE])
        cfg = {"seed": 2015, "n_events": SCALE_RECORDS, "source_mix": 0.79, "categories": cats,
               "window": ["2015-01-01T00:00:00+00:00", "2016-09-01T00:00:00+00:00"],
               "hotspots": [{"lat": 31.23, "lon": 121.47, "sigma_m": 4000, "weight": 3},
                            {"lat": 31.30, "lon": 121.55, "sigma_m": 2500, "weight": 1}],
               "couplings": [{"category_a": "Resident Area Mgmt.", "category_b": "Others (hotline)",
                              "strength": 0.3}],
               "cell_size_m": 500}
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))
        arc = str(tmp_path / "arc")
        steps = [
            ["synth", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "syn")],
            ["ingest", "--input", str(tmp_path / "syn" / "dataset.csv"), "--out", arc],
            ["summary", "--input", arc, "--out", str(tmp_path / "summary")],
            ["temporal", "--input", arc, "--out", str(tmp_path / "temporal"), "--max-lag", "90", "--normalize"],
            ["spatial", "--input", arc, "--out", str(tmp_path / "spatial"), "--max-dist-m", "30000", "--normalize"],
            ["categories", "--input", arc, "--out", str(tmp_path / "categories")],
        ]
        start = time.perf_counter()
        timings = []
        for argv in steps:
            t = time.perf_counter()
            proc = subprocess.run([sys.executable, "-m", "urbangrid", *argv], capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            timings.append(f"{argv[0]} {time.perf_counter() - t:.1f}s")
        total = time.perf_counter() - start
        peak_gb = resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss / 1024 ** 2
        meta = json.loads((tmp_path / "arc" / "dataset.json").read_text())
        c.detail = (f"[{', '.join(timings)}; total {total:.1f} s; peak {peak_gb:.2f} GB; "
                    f"{meta['cell_count']} cells]")
        assert meta["record_count"] == SCALE_RECORDS
        assert meta["cell_count"] >= 500
        assert (tmp_path / "syn" / "dataset.csv").read_bytes().count(b"\n") == SCALE_RECORDS + 1
        assert total < 120
        assert peak_gb < 4


def test_criterion_8_determinism_across_threads(tmp_path, monkeypatch):
    with Criterion(8, "byte-identical outputs across reruns and --threads") as c:
        # small blocks make the threaded sweeps split into many partial sums
        monkeypatch.setattr(relevance, "_GRAM_BLOCK", 5000)
        monkeypatch.setattr(relevance, "_PAIR_BLOCK", 5000)
        cats = [{"name": n, "weight": w, "source": "MobileDevice", "seasonal_amplitude": 0.5}
                for n, w in REPORTED_MOBILE[:4]] + [{"name": n, "weight": w, "source": "Hotline"}
                                                 for n, w in REPORTED_HOTLINE]
        cfg = {"seed": 8, "n_events": 30_000, "categories": cats,
               "window": ["2015-01-01T00:00:00+00:00", "2015-09-01T00:00:00+00:00"],
               "hotspots": [{"lat": 31.23, "lon": 121.47, "sigma_m": 3000}], "cell_size_m": 250}
        (tmp_path / "cfg.json").write_text(json.dumps(cfg))

        def run(tag, threads):
            out = tmp_path / tag
            out.mkdir()
            argvs = [
                ["synth", "--config", str(tmp_path / "cfg.json"), "--out", str(out / "syn")],
                ["ingest", "--input", str(out / "syn" / "dataset.csv"), "--out", str(out / "arc")],
                ["summary", "--input", str(out / "arc"), "--out", str(out / "summary")],
                ["temporal", "--input", str(out / "arc"), "--out", str(out / "temporal"), "--max-lag", "60"],
                ["temporal", "--input", str(out / "arc"), "--out", str(out / "temporal_w"), "--bin", "week",
                 "--normalize"],
                ["spatial", "--input", str(out / "arc"), "--out", str(out / "spatial"), "--max-dist-m", "15000",
                 "--normalize"],
                ["categories", "--input", str(out / "arc"), "--out", str(out / "categories"), "--mode", "min"],
            ]
            files = {}
            for argv in argvs:
                assert main([*argv, "--threads", str(threads)]) == 0
                run_dir = out / argv[argv.index("--out") + 1].rsplit("/", 1)[1]
                for p in sorted(run_dir.iterdir()):
                    if p.name != "manifest.json":
                        files[f"{run_dir.name}/{p.name}"] = p.read_bytes()
            return files

        first = run("a", 1)
        rerun = run("b", 1)
        threaded = run("c", 4)
        c.detail = f"[{len(first)} output files compared]"
        assert first == rerun
        assert first == threaded


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
