import pytest

from memkd.metrics import MetricReport
from memkd.training import RunResult, write_run

# method -> dataset -> test AUC-PRC used by the hand-built run directory
HAND_SCORES = {
    "none": {"d1": 0.70, "d2": 0.60, "d3": 0.90, "d4": 0.50},
    "kd": {"d1": 0.75, "d2": 0.60, "d3": 0.85, "d4": 0.55},
    "memkd": {"d1": 0.80, "d2": 0.65, "d3": 0.88, "d4": 0.55},
}
TEACHER_SCORE = 0.95


def _student(method, dataset, score, seed=0, stage="final"):
    return RunResult("student", method, 1.0, seed, dataset, stage=stage,
                     val_metrics=MetricReport(score, score, score, 10),
                     test_metrics=MetricReport(score, score, score, 10))


@pytest.fixture
def hand_run_dir(tmp_path):
    """3 methods x 4 datasets plus a selected teacher, with decoys the report must skip."""
    run_dir = tmp_path / "runs"
    for method, row in HAND_SCORES.items():
        for dataset, score in row.items():
            write_run(run_dir, _student(method, dataset, score))
            write_run(run_dir, _student(method, dataset, 0.0, seed=9, stage="grid"))
    for dataset in HAND_SCORES["none"]:
        teacher = RunResult("teacher", "none", 0.0, 0, dataset, stage="teacher", selected=True,
                            test_metrics=MetricReport(TEACHER_SCORE, TEACHER_SCORE, TEACHER_SCORE, 10))
        loser = RunResult("teacher", "none", 0.0, 1, dataset, stage="teacher", selected=False,
                          test_metrics=MetricReport(0.1, 0.1, 0.1, 10))
        write_run(run_dir, teacher)
        write_run(run_dir, loser)
    failed = RunResult("student", "memkd", 1.0, 5, "d1", failure="diverged")
    write_run(run_dir, failed)
    return run_dir


# --- acceptance summary ---------------------------------------------------

_acceptance: dict[str, list[str]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance.setdefault(report.nodeid, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for number, (title, test_name) in sorted(CRITERIA.items()):
        outcomes = [o for nodeid, outs in _acceptance.items() if nodeid.endswith("::" + test_name) for o in outs]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status:7s} {title}")
