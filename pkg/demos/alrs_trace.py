"""How ALRS reacts to a loss curve.

A scripted curve falls steeply, flattens, bumps up once and flattens again.
The scheduler warms up for three epochs, holds the target lr while the loss
is still moving, and shrinks it by the decay rate on every flat epoch until
it drops below the minimum.
"""
from flatland.sched import AlrsState, alrs_step

losses = [2.3, 1.6, 1.1, 0.8, 0.62, 0.55, 0.54, 0.535, 0.9, 0.6, 0.58, 0.575] + [0.57] * 40

state = AlrsState(target_lr=0.1, warmup_epochs=3, decay_rate=0.5, min_lr=1e-3)
print(f"{'epoch':>5} {'loss':>7} {'next lr':>10}  note")
for epoch, loss in enumerate(losses):
    lr, stop = alrs_step(state, loss)
    note = "warmup" if state.current_epoch <= state.warmup_epochs else ("decay" if state.last_decayed else "")
    print(f"{epoch:5d} {loss:7.3f} {lr:10.6f}  {note}")
    if stop:
        print(f"lr fell below {state.min_lr}; the stage ends after epoch {epoch}")
        break
