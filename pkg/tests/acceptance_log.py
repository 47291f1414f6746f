"""Collects one verdict line per acceptance check for the terminal summary."""

RESULTS = {}


def record(name, ok, detail=""):
    """Fold one check into ``name``'s verdict; a single failure fails the line.

    ``ok=None`` marks a check that could not be assessed on this machine.
    """
    prev_ok, prev_detail = RESULTS.get(name, (True, ""))
    detail = "; ".join(d for d in (prev_detail, detail) if d)
    RESULTS[name] = (None if ok is None else prev_ok and bool(ok), detail)
    return bool(ok)


def lines():
    word = {True: "PASS", False: "FAIL", None: "NOT ASSESSED"}
    return [f"{name}: {word[ok]}  {detail}" for name, (ok, detail) in RESULTS.items()]
