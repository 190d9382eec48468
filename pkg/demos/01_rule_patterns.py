"""Four rule patterns on four tiny biomedical graphs.

Each graph holds just enough observed facts to ground one rule once.  The
candidate triplet is then scored by that rule alone at weight 1: supporting
patterns push it above 0.5 and negating patterns push it below.

Run with ``python demos/01_rule_patterns.py``.
"""
from kgrefine import RuleInstance, RuleKind, RulePattern, count_groundings
from kgrefine.graph import build_graph
from kgrefine.rules import rule_probability

K = RuleKind

cases = [
    # a vein that drains into a vessel which drains a region is part of that region
    (K.TRANSITIVE, ("tributary_of", "drains", "part_of"),
     [("facial vein", "tributary_of", "internal jugular vein"), ("internal jugular vein", "drains", "face")],
     ("facial vein", "part_of", "face")),
    # interaction holds in both directions
    (K.SYMMETRIC, ("interacts_with",),
     [("CASP1 gene", "interacts_with", "IFITM2 protein")],
     ("IFITM2 protein", "interacts_with", "CASP1 gene")),
    # a gene's product interacting with a protein does not make that protein the gene's product
    (K.BLOCK, ("has_gene_product", "interacts_with", "has_gene_product"),
     [("MKRN3 gene", "has_gene_product", "MKRN3 human protein"),
      ("MKRN3 human protein", "interacts_with", "NPTX1 human protein")],
     ("MKRN3 gene", "has_gene_product", "NPTX1 human protein")),
    # a process's input is not also its output
    (K.CONFLICT, ("has_primary_input", "has_primary_output"),
     [("morphine catabolic process", "has_primary_input", "morphine"),
      ("morphine catabolic process", "has_primary_output", "CO2")],
     ("morphine catabolic process", "has_primary_output", "morphine")),
]

for kind, relation_names, observed, candidate in cases:
    g = build_graph(observed, [candidate])
    pattern = RulePattern(kind, tuple(g.relations.id(name) for name in relation_names))
    rule = RuleInstance(pattern, weight=1.0)
    tau = g.from_names(*candidate)
    n = count_groundings(g, rule, tau)
    p = rule_probability([rule], tau, g)
    print(f"{kind.value:<10} polarity {kind.polarity:+d}  groundings {n}  P_rule {p:.4f}  {' / '.join(candidate)}")

# Doubling the weight sharpens the verdict in the same direction.
g = build_graph(cases[2][2], [cases[2][3]])
block = RulePattern(K.BLOCK, tuple(g.relations.id(n) for n in cases[2][1]))
for w in (0.5, 1.0, 2.0, 4.0):
    print(f"block rule at weight {w}: P_rule {rule_probability([RuleInstance(block, w)], g.from_names(*cases[2][3]), g):.4f}")
