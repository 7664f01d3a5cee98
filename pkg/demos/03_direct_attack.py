"""Attack all members at once through a merged model.

An attacker who knows the whole family can average the members'
probabilities into one differentiable model and run C&W against it. The
randomized defense is then scored on those examples. This demo loads the
family written by ``02_build_the_defense.py`` if it exists.

    python demos/03_direct_attack.py --cw-n 100
"""

from pathlib import Path

import numpy as np

from _common import load, parser
from muldef import attacks, defense, evaluation, nn

p = parser(__doc__.splitlines()[0])
p.add_argument("--cw-n", type=int, default=100)
p.add_argument("--family", default="runs/demo-family")
args = p.parse_args()

if not Path(args.family, "manifest.json").exists():
    raise SystemExit(f"no family at {args.family}; run demos/02_build_the_defense.py first")
family = defense.load_family(args.family)
_, test = load(args)
sub = test.take(np.arange(args.cw_n))
clf = defense.MuldefClassifier(family, selection_seed=args.seed)

cw = attacks.CwConfig(confidence=0.01, max_iterations=300)
report = evaluation.whitebox_eval(clf, cw, sub)
s = report.summary
print(f"T on its own C&W set:             {100 * report.lookup('T', 'T'):.2f}%")
print(f"defense, worst single-member set: {100 * s['indirect_min_accuracy']:.2f}%")
print(f"defense, merged-model attack:     {100 * s['direct_accuracy']:.2f}%")
merged = defense.merged_model(family)
adv = report.adv_sets[("whitebox", "cw", "merged")]
print(f"the merged model itself on that set: {100 * nn.accuracy(merged, adv.x, adv.y):.2f}%")
print(f"white-box score (the attacker's better option): {100 * s['whitebox_accuracy']:.2f}%")
