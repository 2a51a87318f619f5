"""Misbehaving and trivial plugins used to exercise the worker runtime.

Run as ``python3 -m prism_gateway.demo_models.test_plugins <kind> [arg]``:

* ``counter`` — increments a process-global counter and returns it; proves
  every call gets a fresh process (the value is always 1).
* ``echo`` — returns its model_input unchanged; a fast no-op model.
* ``sleeper`` — sleeps far past any sane wall timeout.
* ``hog`` — allocates memory until something gives.
* ``burn [cpu_seconds]`` — busy-loops a target amount of CPU (default 0.4).
* ``writer`` — tries to write outside its scratch directory.
* ``chatty`` — writes a valid response and then keeps talking.
"""

from __future__ import annotations

import os
import sys
import time
from typing import Optional

from ..plugin import run_plugin

_COUNTER = 0


def _counter(func: str, model_input: Optional[dict], seed: Optional[int]) -> dict:
    global _COUNTER
    _COUNTER += 1
    return {"value": _COUNTER}


def _echo(func: str, model_input: Optional[dict], seed: Optional[int]) -> dict:
    return {"echo": model_input if model_input is not None else {}}


def _sleeper(func: str, model_input: Optional[dict], seed: Optional[int]) -> dict:
    time.sleep(3600)
    return {"slept": True}


def _hog(func: str, model_input: Optional[dict], seed: Optional[int]) -> dict:
    blocks = []
    while True:
        blocks.append(bytearray(16 * 1024 * 1024))


def _make_burn(target: float):
    def _burn(func: str, model_input: Optional[dict], seed: Optional[int]) -> dict:
        while time.process_time() < target:
            sum(i * i for i in range(1000))
        return {"burned_cpu_seconds": time.process_time()}

    return _burn


def _writer(func: str, model_input: Optional[dict], seed: Optional[int]) -> dict:
    target = f"/tmp/prism-escape-{os.getpid()}.txt"
    try:
        with open(target, "w") as fh:
            fh.write("escaped\n")
        escaped = True
        os.unlink(target)
    except OSError:
        escaped = False
    return {"wrote_outside_scratch": escaped}


def main(argv: list[str]) -> int:
    kind = argv[0] if argv else "counter"
    if kind == "chatty":
        code = run_plugin(_echo)
        sys.stdout.write("and another thing\n")
        sys.stdout.flush()
        return code
    handlers = {
        "counter": _counter,
        "echo": _echo,
        "sleeper": _sleeper,
        "hog": _hog,
        "writer": _writer,
    }
    if kind == "burn":
        target = float(argv[1]) if len(argv) > 1 else 0.4
        return run_plugin(_make_burn(target))
    return run_plugin(handlers[kind])


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
