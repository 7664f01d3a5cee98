"""Two exploratory sweeps.

1. Augmentation fraction. Fine-tuning T on its own adversarial examples does
   not make it robust to a fresh attack on itself, yet a separate model
   trained on those examples resists T's adversarial set.
2. Family size. White-box accuracy of the defense as members are added,
   using prefixes of one solution-2 family.

    python demos/05_sweeps.py --n-train 4000 --sizes 1 2 3 5
"""

from _common import load, parser, train_target
from muldef import attacks, defense, evaluation, nn

p = parser(__doc__.splitlines()[0])
p.add_argument("--fractions", type=float, nargs="+", default=[0.0, 0.05, 0.15, 0.3, 0.5])
p.add_argument("--sizes", type=int, nargs="+", default=[1, 2, 3, 5])
args = p.parse_args()

train, test = load(args)
T = train_target(train, args)
tcfg = nn.TrainConfig(batch_size=64, max_epochs=args.epochs)
fgsm = attacks.FgsmConfig(eps=0.3)

aug = evaluation.sweep_augmentation(T, train, test, fgsm, args.fractions, tcfg, seed=args.seed)
print("fraction  retrained-T on own set  separate D on Adv_T")
for f, a, b in zip(aug["fractions"], aug["retrained"], aug["separate"]):
    print(f"  {f:6.2f}  {100 * a:20.2f}%  {100 * b:18.2f}%")

gen = defense.GeneratorConfig(attack=fgsm, train_cfg=tcfg, rng_seed=args.seed)
size = evaluation.sweep_family_size(T, train, test, gen, args.sizes)
print("models  white-box accuracy (min over members' FGSM sets)")
for k, w in zip(size["sizes"], size["whitebox"]):
    print(f"  {k:5d}  {100 * w:8.2f}%")
