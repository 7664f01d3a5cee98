"""Build a model family and read its cross-accuracy matrix.

Each new member is trained on the original data plus the adversarial sets
of all earlier members. Every member is then attacked on the test set and
each column of the matrix below is one of those adversarial sets. The
diagonal collapses, but the other members hold up, so a defense that picks
a member at random keeps most of its accuracy on every set.

    python demos/02_build_the_defense.py --members 4
"""

from _common import load, parser, show_matrix, train_target
from muldef import attacks, defense, evaluation, nn

p = parser(__doc__.splitlines()[0])
p.add_argument("--members", type=int, default=4, help="additional models beyond T")
p.add_argument("--solution", default="solution2", choices=defense.SOLUTIONS)
args = p.parse_args()

train, test = load(args)
T = train_target(train, args)
cfg = defense.GeneratorConfig(num_additional=args.members, solution=args.solution,
                              attack=attacks.FgsmConfig(eps=0.3),
                              train_cfg=nn.TrainConfig(batch_size=64, max_epochs=args.epochs),
                              rng_seed=args.seed)
family = defense.generate_family(T, train, cfg, progress=print)
clf = defense.MuldefClassifier(family, selection_seed=args.seed)

tests = evaluation.test_accuracy_report(clf, test)
print("test accuracy:", ", ".join(f"{k} {100 * v:.2f}%" for k, v in tests.test_accuracy.items()))

report = evaluation.indirect_attack_eval(clf, attacks.FgsmConfig(eps=0.3), test, draws=3)
ids = family.ids
show_matrix(report.matrix(ids + ["muldef", "muldef_mc"], ids), ids + ["defense", "sampled"], ids,
            "accuracy of each classifier (rows) on each member's FGSM set (columns)")
s = report.summary
print(f"worst set for the defense: Adv[{s['indirect_min_source']}] at "
      f"{100 * s['indirect_min_accuracy']:.2f}%, while T alone scores "
      f"{100 * report.lookup('T', 'T'):.2f}% on its own set")
defense.save_family(family, "runs/demo-family", seed=args.seed)
print("family written to runs/demo-family")
