"""Collects the one-line verdict of each acceptance criterion for the terminal summary."""

ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed
