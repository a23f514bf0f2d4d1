# tests/test_reports.py

import pandas as pd
import pytest

from app.services.model import TransitionType
from app.services.reports import (
    ReportError,
    analytic_sweep_tables,
    pi_frame,
    report_frame,
    simulated_sweep_tables,
    write_frame,
    write_simulation_outputs,
    write_solve_outputs,
    write_sweep_tables,
)
from app.services.simulator import SimulationConfig, simulate
from app.services.solver import solve
from tests.factories import n_graph, path_model


def test_solve_outputs_are_plain_csv(tmp_path):
    report = solve(*n_graph())
    report_path, pi_path = write_solve_outputs(report, str(tmp_path / "out"))

    raw = open(report_path, "rb").read()
    assert b"\r\n" not in raw
    assert raw.startswith(b"metric,class,value\npi_empty,,0.666666666667\n")

    pi = pd.read_csv(pi_path, keep_default_na=False)
    assert list(pi.columns) == ["set", "members", "probability", "delta"]
    assert list(pi["set"]) == ["{}", "{2,A}"]
    assert pi.loc[1, "members"] == "2 A"
    assert float(pi.loc[1, "delta"]) == pytest.approx(0.25)
    assert pi.loc[0, "delta"] == "nan"


def test_significant_digits(tmp_path):
    frame = pd.DataFrame({"x": [1 / 3]})
    path = write_frame(frame, str(tmp_path / "x.csv"), significant_digits=4)
    assert open(path, encoding="utf-8").read() == "x\n0.3333\n"


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("", encoding="utf-8")
    with pytest.raises(ReportError):
        write_frame(pd.DataFrame({"x": [1]}), str(blocker / "sub" / "x.csv"))


def test_report_frame_matches_metric_rows():
    report = solve(*path_model(0.5))
    frame = report_frame(report)

    assert len(frame) == len(report.metric_rows())
    assert set(frame["metric"]) >= {"pi_empty", "waiting_probability", "mean_wait", "transition_probability"}
    assert len(pi_frame(report.pi)) == 43


def test_analytic_sweep_tables_layout():
    points = [(rho, solve(*path_model(rho))) for rho in (0.25, 0.5, 0.75)]
    tables = analytic_sweep_tables(points)

    assert set(tables) == {
        "waiting_customers", "waiting_servers", "mean_wait_customers", "mean_wait_servers",
        "transitions", "pi_empty",
    }
    assert list(tables["waiting_servers"].columns) == ["parameter", "A", "B", "C", "D", "E", "average"]
    assert list(tables["transitions"].columns) == ["parameter", *(t.value for t in TransitionType)]
    assert list(tables["pi_empty"]["parameter"]) == [0.25, 0.5, 0.75]
    assert analytic_sweep_tables([]) == {}


def test_simulated_tables_and_outputs(tmp_path):
    graph, arrivals = n_graph()
    estimate = simulate(graph, arrivals, SimulationConfig(seed=1, warmup_slots=100, measured_slots=2_000, replications=2))

    tables = simulated_sweep_tables([(0.0, estimate)])
    assert list(tables["sim_waiting_customers"].columns) == ["parameter", "1", "2", "average"]
    assert tables["sim_waiting_customers"].loc[0, "1"] == 0.0

    written = write_sweep_tables(tables, str(tmp_path))
    assert sorted(p.rsplit("/", 1)[-1] for p in written) == sorted(f"{name}.csv" for name in tables)

    path = write_simulation_outputs(estimate, str(tmp_path))
    assert open(path, encoding="utf-8").readline() == "metric,class,mean,stddev\n"
