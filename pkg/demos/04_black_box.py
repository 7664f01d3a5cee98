"""Black-box attack through a substitute model.

The attacker only sees labels. Starting from 150 held-out images, a
substitute network is trained on the oracle's answers and its training set
is doubled five times by stepping along the substitute's Jacobian signs
(150 * 2**5 = 4800 points). FGSM examples crafted on the substitute are
then sent to the real target and to the randomized defense.

    python demos/04_black_box.py
"""

from _common import load, parser, train_target
from muldef import attacks, data, defense, evaluation, nn

p = parser(__doc__.splitlines()[0])
p.add_argument("--members", type=int, default=4)
args = p.parse_args()

train, test = load(args)
T = train_target(train, args)
family = defense.generate_family(T, train, defense.GeneratorConfig(
    num_additional=args.members, train_cfg=nn.TrainConfig(batch_size=64, max_epochs=args.epochs),
    rng_seed=args.seed))
clf = defense.MuldefClassifier(family, args.seed)

holdout = data.sample_subset(test, 150, seed=args.seed + 7)
sub_cfg = attacks.SubstituteConfig(seed=args.seed)
fgsm = attacks.FgsmConfig(eps=0.3)
rt = evaluation.blackbox_eval(T, sub_cfg, fgsm, test, holdout, label="T")
rd = evaluation.blackbox_eval(clf, sub_cfg, fgsm, test, holdout, label="muldef")
white = attacks.fgsm(T, test, fgsm)
print(f"substitute training set: {rt.summary['substitute_set_size[T]']} points, "
      f"{rt.summary['blackbox_queries[T]']} oracle queries")
print(f"T, white-box FGSM:  {100 * nn.accuracy(T, white.x, white.y):.2f}%")
print(f"T, black-box FGSM:  {100 * rt.summary['blackbox_accuracy[T]']:.2f}%")
print(f"defense, black-box: {100 * rd.summary['blackbox_accuracy[muldef]']:.2f}%")
