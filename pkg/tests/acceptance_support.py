"""Cached scenario runs for the acceptance suite.

A run is cached under ``.acceptance_cache/<scenario>-<key>/`` where ``key``
hashes the config file bytes together with the syntax trees of every source
file the simulation imports (all of the package except the command-line front
end), so any change to the numerical code invalidates the cache while edits
to comments and docstrings do not.  Prefill from the command line::

    python3 tests/acceptance_support.py [--workers N] [CONFIG ...]
"""
from __future__ import annotations

import argparse
import ast
import hashlib
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
CONFIG_DIR = ROOT / "configs" / "acceptance"
CACHE_DIR = ROOT / ".acceptance_cache"
SRC = ROOT / "src" / "countiptw"


def _strip_docstrings(tree: ast.AST) -> ast.AST:
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if (isinstance(body, list) and body and isinstance(body[0], ast.Expr)
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str)):
            node.body = body[1:] or [ast.Pass()]
    return tree


def code_version() -> str:
    """Hash of the package's syntax trees; comments and docstrings do not count."""
    h = hashlib.sha256()
    for p in sorted(SRC.rglob("*.py")):
        if p.name == "cli.py":
            continue
        h.update(p.relative_to(SRC).as_posix().encode())
        h.update(ast.dump(_strip_docstrings(ast.parse(p.read_text(encoding="utf-8")))).encode())
    return h.hexdigest()


def cache_key(config_path: Path) -> str:
    h = hashlib.sha256()
    h.update(Path(config_path).read_bytes())
    h.update(code_version().encode())
    return h.hexdigest()[:16]


# one line per acceptance criterion, echoed again in the terminal summary
REPORT: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> str:
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}"
    REPORT.append(line)
    return line


def cached_run(config_name: str, workers: int = 1) -> Path:
    """Path of the per-replication CSV for ``configs/acceptance/<config_name>.toml``."""
    from countiptw.data_model import load_scenario_config
    from countiptw.harness import run_scenario

    path = CONFIG_DIR / f"{config_name}.toml"
    cfg = load_scenario_config(path)
    out = CACHE_DIR / f"{cfg.scenario_id}-{cache_key(path)}"
    reps = out / f"{cfg.scenario_id}_reps.csv"
    if not reps.exists():
        tmp = out.with_name(out.name + ".partial")
        run = run_scenario(cfg, workers=workers, out_dir=tmp)
        assert run.files["reps"].exists()
        tmp.rename(out)
    return reps


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("configs", nargs="*", help="config names (default: all)")
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args(argv)
    names = args.configs or sorted(q.stem for q in CONFIG_DIR.glob("*.toml"))
    for name in names:
        print(name, cached_run(name, args.workers), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
