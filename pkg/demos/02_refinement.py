"""Refining a noisy synthetic graph.

A generator plants two rules of each kind in a 1,000-entity graph and adds
10% noise, most of it breaking a planted negating rule.  Part of the true
graph is held out; the held-out facts plus the noise form the candidate set
the refinement has to sort.  The embedding alone, the refined embedding (Q)
and the refined embedding plus rule probability (Q + P) are compared.

Run with ``python demos/02_refinement.py [backend]``, e.g. ``distmult``.
Expect about a minute on one core.
"""
import sys

from kgrefine import EmConfig, EvalSplit, TrainConfig, evaluate_ptd, final_scores, init_model, mine_rules, train
from kgrefine import default_acceptance_spec, generate, ptd_split, run_refinement
from kgrefine.em import decision_threshold

kind = sys.argv[1] if len(sys.argv) > 1 else "transe"

sg = generate(default_acceptance_spec())
problem = ptd_split(sg, seed=0)
g = problem.graph
split = EvalSplit(problem.positives, problem.negatives)
print(f"{g.entity_count} entities, {len(g.observed)} observed, {len(problem.positives)} held-out true, "
      f"{len(problem.negatives)} noise")

# Mined rules: precision is the initial weight.  Besides the planted rules
# the miner finds weaker coincidental ones, which the M-step then down-weights.
rules = mine_rules(g)
planted = {p.pattern for p in sg.planted}
counts = {}
for rule in rules:
    counts[rule.kind.value] = counts.get(rule.kind.value, 0) + 1
print(f"{len(rules)} rules mined {counts}, {sum(r.pattern in planted for r in rules)} of {len(planted)} planted found")

# The embedding trained on observed facts only is the baseline.
tc = TrainConfig(seed=0)
warm = train(init_model(g, kind, 30, 1.0, 0), g, g.observed_array, (), tc)
print(f"embedding only      F {evaluate_ptd(split, warm, 0.5).f_score:.3f}")

state, model, weighted = run_refinement(g, rules, EmConfig(), tc, kind, model=warm)
for h in state.history:
    print(f"  round {h['round']}: {h['distilled_true']} candidates accepted, {h['distilled_false']} rejected, "
          f"pseudo-log-likelihood {h['pseudo_log_likelihood']:.1f}")
print(f"refined Q           F {evaluate_ptd(split, model, decision_threshold('q')).f_score:.3f}")
mixed = lambda x: final_scores(state, model, weighted, g, x, "q+p", 1.0)
print(f"refined Q + P       F {evaluate_ptd(split, mixed, decision_threshold('q+p', 1.0)).f_score:.3f}")

print("planted rules, initial and final weight:")
for before, after in zip(rules, weighted):
    if before.pattern in planted:
        print(f"  {after.kind.value:<10} {after.pattern.relations}  {before.precision:.3f} -> {after.weight:.3f}")
others = [abs(l.weight) for l in weighted if l.pattern not in planted]
if others:
    print(f"other rules: mean |weight| {sum(others) / len(others):.3f}")
