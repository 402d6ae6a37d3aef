#!/usr/bin/env python3
"""Writes corpus/*.json next to the hand-written corpus/*.s files."""
import json
import pathlib

ROOT = pathlib.Path(__file__).resolve().parent.parent / "corpus"

FOO = 0x10000
SIZE = 0x20000
BAR = 0x40000
SECRET = FOO + 8 * 0x1000  # foo[0x1000]
SECRET_VALUE = 0x5C0


def h(v):
    return hex(v)


def line_addrs(start, nbytes):
    return [h(a) for a in range(start & ~63, start + nbytes, 64)]


def gadget_memory(n=16, secret=SECRET):
    foo = [(k + 1) * 64 for k in range(n)]
    bar = [(3 * k) & 0xFF for k in range(512)]
    return [
        {"address": h(FOO), "qwords": foo},
        {"address": h(SIZE), "qwords": [n]},
        {"address": h(BAR), "qwords": bar},
        {"address": h(secret), "qwords": [SECRET_VALUE, SECRET_VALUE + 64, 0, 0, 0, 0, 0, 0]},
    ]


def gadget_state(regs, n=16, secret=SECRET, warm=None):
    base = {"rsi": h(FOO), "rdx": h(BAR), "r8": h(SIZE)}
    base.update({k: (h(v) if isinstance(v, int) and v >= 0 else str(v)) for k, v in regs.items()})
    s = {
        "schema": 1,
        "registers": base,
        "memory": gadget_memory(n, secret),
        "secret_regions": [{"start": h(secret), "length": 64}],
    }
    if warm is not None:
        s["warm_lines"] = warm
    return s


def gadget(entry, vectors, attack_regs, reg_bound=False, secret=SECRET, n=16, bench_regs=None):
    fix = (lambda r: {**r, "r8": n}) if reg_bound else (lambda r: r)
    warm_base = [h(SIZE)]
    bench_warm = [h(SIZE)] + line_addrs(FOO, 8 * n) + line_addrs(BAR, 4096)
    return {
        "schema": 1,
        "entry": entry,
        "class": "gadget",
        "vectors": [gadget_state(fix(v), n, secret) for v in vectors],
        "attack": {
            "state": gadget_state(fix(attack_regs), n, secret, warm_base),
            "attack_lines": [h(secret)],
        },
        "bench": gadget_state(fix(bench_regs or vectors[0]), n, secret, bench_warm),
    }


OOB = 0x1000
GADGETS = {
    "bounds_check": gadget("victim", [{"rdi": 0}, {"rdi": 7}, {"rdi": 41}, {"rdi": 42}, {"rdi": OOB}], {"rdi": OOB},
                    bench_regs={"rdi": 3}),
    "size_in_memory": gadget("victim", [{"rdi": 0}, {"rdi": 9}, {"rdi": 15}, {"rdi": 16}, {"rdi": OOB}],
                             {"rdi": OOB}),
    "size_in_register": gadget("victim", [{"rdi": 0}, {"rdi": 9}, {"rdi": 15}, {"rdi": 16}, {"rdi": OOB}],
                             {"rdi": OOB}, reg_bound=True),
    "bounded_store": gadget("victim", [{"rdi": 0, "rcx": 77}, {"rdi": 4, "rcx": 5}, {"rdi": 15, "rcx": 1},
                                     {"rdi": OOB, "rcx": 9}], {"rdi": OOB, "rcx": 9}),
    "nested_bounds": gadget("victim", [{"rdi": 1, "rcx": 2}, {"rdi": 15, "rcx": 0}, {"rdi": 3, "rcx": 16},
                                       {"rdi": 16, "rcx": 3}, {"rdi": OOB, "rcx": OOB}], {"rdi": OOB, "rcx": 1}),
    "chained_loads": gadget("victim", [{"rdi": 0}, {"rdi": 5}, {"rdi": 15}, {"rdi": OOB}], {"rdi": OOB}),
    "switch_chain": gadget("victim", [{"rdi": 2, "rcx": 0}, {"rdi": 2, "rcx": 1}, {"rdi": 2, "rcx": 2},
                                      {"rdi": 12, "rcx": 1}, {"rdi": OOB, "rcx": 0}], {"rdi": OOB, "rcx": 0}),
    "loop_bounded": gadget("victim", [{}, {}, {}, {}], {}, n=4, secret=FOO + 32),
    "lea_index": gadget("victim", [{"rdi": 0}, {"rdi": 6}, {"rdi": 15}, {"rdi": 16}, {"rdi": OOB}], {"rdi": OOB},
                        reg_bound=True),
    "narrow_loads": gadget("victim", [{"rdi": 0}, {"rdi": 3}, {"rdi": 15}, {"rdi": 16}, {"rdi": OOB}],
                           {"rdi": OOB}),
    "stack_spill": gadget("victim", [{"rdi": 0, "rbx": 11, "rbp": 22}, {"rdi": 8, "rbx": 1, "rbp": 2},
                                     {"rdi": 15}, {"rdi": OOB, "rbx": 3}], {"rdi": OOB}),
    "call_helper": gadget("victim", [{"rdi": 0}, {"rdi": 10}, {"rdi": 15}, {"rdi": OOB}], {"rdi": OOB}),
    "signed_check": gadget("victim", [{"rdi": 0}, {"rdi": 14}, {"rdi": -5}, {"rdi": 16}, {"rdi": OOB}],
                           {"rdi": OOB}, reg_bound=True),
}

# loop_bounded varies n through memory rather than registers
def loop_bounded_vectors():
    out = []
    for n in (0, 1, 3, 4):
        s = gadget_state({}, 4, FOO + 32)
        s["memory"][1]["qwords"] = [n]
        out.append(s)
    return out


GADGETS["loop_bounded"]["vectors"] = loop_bounded_vectors()


def kstate(regs, memory=(), warm=(), step_limit=None):
    s = {"schema": 1, "registers": {k: h(v) for k, v in regs.items()}, "memory": list(memory)}
    if warm:
        s["warm_lines"] = list(warm)
    if step_limit:
        s["step_limit"] = step_limit
    return s


def kernel(entry, vectors, bench):
    return {"schema": 1, "entry": entry, "class": "kernel", "vectors": vectors, "bench": bench}


def ilp(n, warm=False):
    return kstate({"rsi": FOO, "r11": n}, [{"address": h(FOO), "qwords": [0] * 8}],
                  [h(FOO)] if warm else [])


def serial(n):
    return kstate({"r11": n})


def tight(n, key, warm=False):
    data = [2 * k + 1 for k in range(n)]
    return kstate({"rsi": FOO, "r11": n, "r9": key}, [{"address": h(FOO), "qwords": data}],
                  line_addrs(FOO, 8 * n) if warm else [])


def histogram(n, warm=False):
    data = [(7 * k) % 64 for k in range(n)]
    return kstate({"rsi": FOO, "rdx": BAR, "r11": n},
                  [{"address": h(FOO), "qwords": data}, {"address": h(BAR), "qwords": [0] * 64}],
                  (line_addrs(FOO, 8 * n) + line_addrs(BAR, 512)) if warm else [])


def pca(rows, warm=False):
    data = [(5 * k + 3) % 101 for k in range(4 * rows)]
    return kstate({"rsi": FOO, "rcx": rows}, [{"address": h(FOO), "qwords": data}],
                  line_addrs(FOO, 32 * rows) if warm else [])


KERNELS = {
    "ilp": kernel("kernel", [ilp(1), ilp(2), ilp(5), ilp(9)], ilp(200, True)),
    "serial": kernel("kernel", [serial(1), serial(2), serial(7), serial(20)], serial(200)),
    "tight": kernel("kernel", [tight(8, 0), tight(8, 1), tight(8, 9), tight(12, 23)], tight(256, 0, True)),
    "histogram": kernel("kernel", [histogram(4), histogram(8), histogram(16), histogram(0)], histogram(256, True)),
    "pca": kernel("kernel", [pca(0), pca(1), pca(3), pca(6)], pca(100, True)),
}


def dump(meta):
    # one state per line keeps the files diffable without exploding them
    lines = []
    for k, v in meta.items():
        if k == "vectors":
            inner = ",\n".join("  " + json.dumps(x) for x in v)
            lines.append(f' "{k}": [\n{inner}\n ]')
        else:
            lines.append(f" {json.dumps(k)}: {json.dumps(v)}")
    return "{\n" + ",\n".join(lines) + "\n}\n"


def main():
    for name, meta in {**GADGETS, **KERNELS}.items():
        if not (ROOT / f"{name}.s").exists():
            raise SystemExit(f"missing {name}.s")
        (ROOT / f"{name}.json").write_text(dump(meta))


if __name__ == "__main__":
    main()
