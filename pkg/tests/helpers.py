"""Shared test utilities: random smooth expressions with controlled growth."""

import numpy as np

from invarlab.exprlang import Bin, Func, Neg, Num, Var


def random_smooth_expr(rng, depth=3):
    """Random expression in V from the smooth grammar subset, built so that
    values and the first few derivatives stay moderate on [0.1, 3]."""
    if depth == 0 or rng.random() < 0.2:
        if rng.random() < 0.5:
            return Var("V")
        return Num(float(np.round(rng.uniform(0.3, 2.0), 3)))
    kind = rng.integers(0, 8)
    sub = random_smooth_expr(rng, depth - 1)
    sub2 = random_smooth_expr(rng, depth - 1)
    if kind == 0:
        return Bin("+", sub, sub2)
    if kind == 1:
        return Bin("-", sub, sub2)
    if kind == 2:
        return Bin("*", sub, Func("tanh", sub2))
    if kind == 3:
        return Func("sin", sub)
    if kind == 4:
        return Func("cos", sub)
    if kind == 5:
        return Func("sqrt", Bin("+", Bin("^", sub, Num(2.0)), Num(0.5)))
    if kind == 6:
        return Func("ln", Bin("+", Bin("^", sub, Num(2.0)), Num(1.0)))
    return Neg(Func("exp", Func("tanh", sub)))
