"""Collects one verdict line per acceptance criterion for the terminal summary."""
VERDICTS = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[n] = line
    print(line)
    assert ok, line
