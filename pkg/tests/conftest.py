from helpers import ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[crit]
        ok = all(v[0] for v in parts.values())
        if list(parts) == [""]:
            detail = parts[""][1]
        else:
            detail = "; ".join(f"({p}) {'pass' if v[0] else 'FAIL'}: {v[1]}" for p, v in sorted(parts.items()))
        terminalreporter.write_line(f"criterion {crit:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
