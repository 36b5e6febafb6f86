from collections import Counter
from decimal import Decimal

from sammon.check import ERROR, WARNING, check_model, has_errors
from sammon.loader import load_text

LEAF = "(define-ensemble leaf)"


def codes(m):
    return Counter(f.code for f in check_model(m))


def test_maf_has_twelve_prob_sum_warnings_and_no_errors(maf):
    findings = check_model(maf)
    assert not has_errors(findings)
    probsum = [f for f in findings if f.code == "ProbSum"]
    assert len(probsum) == 12
    assert all(f.severity == WARNING for f in probsum)
    comps = Counter(f.message.split(": ")[1].split(" given")[0] for f in probsum)
    assert comps == {c: 2 for c in ("save", "get-leg", "get-movement", "get-sortie",
                                    "add-additional-info-to-model", "continue")}
    sums = Counter(f.message.rsplit(" ", 1)[1] for f in probsum)
    assert sums == {"0.991": 6, "1.009": 6}


def test_exact_pairs_have_no_prob_sum():
    m = load_text("""(define-ensemble top :entry-events :auto
        :components ((a :type leaf :models (normal compromised)))
        :resources ((r t (normal .7) (hacked .3)))
        :model-mappings ((a normal ((r normal)) .99) (a compromised ((r normal)) .01)
                         (a normal ((r hacked)) .9) (a compromised ((r hacked)) .1)))""" + LEAF)
    assert "ProbSum" not in codes(m)


def test_prior_sum_lint():
    m = load_text("(define-ensemble top :entry-events :auto :resources ((r t (normal .7) (hacked .2))))")
    (f,) = [f for f in check_model(m) if f.code == "ProbSum"]
    assert "0.9" in f.message


def test_dangling_resource_is_error():
    m = load_text("""(define-ensemble top :entry-events :auto
        :components ((a :type leaf))
        :resource-mappings ((a ghost)))""" + LEAF)
    (f,) = [f for f in check_model(m) if f.code == "DanglingResource"]
    assert f.severity == ERROR and "ghost" in f.message


def test_dangling_references():
    m = load_text("""(define-ensemble top :entry-events :auto
        :components ((a :type nowhere) (b :type leaf))
        :splits ((s no-model (x) (p q)))
        :controlflows ((after a before zzz)))""" + LEAF)
    c = codes(m)
    assert c["DanglingComponentType"] == 1
    assert c["DanglingSplitModel"] == 1
    assert c["DanglingEndpoint"] == 1


def test_unknown_branch():
    m = load_text("""(define-ensemble top :entry-events :auto
        :components ((b :type leaf))
        :splits ((s sm (x) (yes no)))
        :controlflows ((after s-maybe before b)))
        (defsplit sm (x) (yes (equal ?x 'y)) (no (equal ?x 'n)))""" + LEAF)
    assert codes(m)["DanglingBranch"] == 1


def test_top_selection():
    assert codes(load_text(LEAF))["MissingTop"] == 1
    two = "(define-ensemble a :entry-events :auto) (define-ensemble b :entry-events :auto)"
    assert codes(load_text(two))["AmbiguousTop"] == 1


def test_unreachable_and_io_mismatch():
    m = load_text("""(define-ensemble top :entry-events :auto :components ((a :type leaf)))
        (define-ensemble leaf :inputs (x))
        (define-ensemble orphan)
        (defbehavior-model (leaf normal) :inputs (y))""")
    c = codes(m)
    assert c["Unreachable"] == 1
    assert c["IOMismatch"] == 1


def test_unmapped_vulnerability_and_vacuous_rule(maf):
    m = load_text("""(define-ensemble top :entry-events :auto
        :resources ((r t (normal .5) (hacked .5)))
        :vulnerabilities ((r weak-spot)))
        (define-attack-model am :attack-types ((atk .1)) :vulnerability-mapping ())""")
    assert codes(m)["UnmappedVulnerability"] == 1
    assert codes(maf)["VacuousRule"] == 3


def test_unregistered_events_only_when_registry_used():
    base = "(define-ensemble top :entry-events :auto :components ((a :type leaf)))" \
           "(define-ensemble leaf :entry-events (go) :exit-events (done))"
    assert "UnregisteredEvent" not in codes(load_text(base))
    reg = "(register-event 'go C \"go\" '())"
    assert codes(load_text(base + reg))["UnregisteredEvent"] == 1


def test_findings_serialize(maf):
    f = check_model(maf)[0]
    d = f.to_json()
    assert set(d) == {"severity", "code", "message", "location"}
    assert isinstance(d["location"], str)
