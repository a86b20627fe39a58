"""How the five learning strategies split the loss weight over training.

    python demos/schedule.py

The transitive row uses a made-up distance trace that shrinks by half.
"""

from tpl.scheduler import ScheduleState, StrategyKind, strategy_weights

T, every = 1000, 100
d_trace = [0.30 - 0.15 * t / T for t in range(0, T, every)]

state = ScheduleState(T, "transitive", checkpoint_every=every)
for t, d in zip(range(0, T, every), d_trace):
    state.checkpoint(t, d)
print(f"theta set at the first checkpoint: {state.theta:.1f}")

print("t     " + "  ".join(f"{k.value:>11}" for k in StrategyKind))
for i, t in enumerate(range(0, T, every)):
    cells = []
    for k in StrategyKind:
        if k is StrategyKind.TRANSITIVE:
            w_s = state.history[i][4]
        else:
            w_s = strategy_weights(k, t, T, checkpoint_every=every)[1]
        cells.append(f"{w_s:11.3f}")
    print(f"{t:<5} " + "  ".join(cells))
print("(cells are w_S; w_V = 1 - w_S)")
