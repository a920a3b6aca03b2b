import os
import sys

from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=50,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

HELPERS_DIR = os.path.join(os.path.dirname(__file__), "helpers")
FAULT_EVALUATOR = os.path.join(HELPERS_DIR, "fault_evaluator.py")
PYTHON = sys.executable

# (criterion name, passed, measured detail) rows appended by the acceptance
# tests; replayed after the run so the verdict lines survive output capture.
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for name, ok, detail in ACCEPTANCE_RESULTS:
            verdict = "PASS" if ok else "FAIL"
            terminalreporter.write_line(f"[{verdict}] {name}: {detail}")
