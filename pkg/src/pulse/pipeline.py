"""Stage orchestration over an artifact directory.

Layout under the artifacts root::

    data/          raw and preprocessed interactions, split, candidate slates, catalog
    checkpoints/   backbone, encoders, scoring heads
    rationales/    positives, behavior texts, trees, selected leaves
    reports/       predictions, reports, plot data
    manifest.json  per-stage fingerprint and output hashes

A stage whose fingerprint and outputs match the manifest is reused; a
fingerprint mismatch or a modified output raises ``ArtifactMismatch`` unless
``force`` is set.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from pulse import backbone as bb
from pulse import data as D
from pulse import evaluation as E
from pulse import sft as S
from pulse import thought_space as T
from pulse.config import RunConfig
from pulse.core.params import ParamStore
from pulse.errors import (AblationContaminated, ArtifactMismatch, InvalidArgument, ProtocolViolation,
                          PulseError)
from pulse.rationale import (CountingBackend, GenerationRequest, HttpBackend, MockBackend, PromptContext,
                             Rationale, RationaleTree, build_phase1_prompt, build_phase2_prompt,
                             expand_tot, generate, load_rationales, load_trees, rationale_from_text,
                             save_rationales, save_trees)
from pulse.utils import (derive_seed, fingerprint, read_json, read_jsonl, sha256_file, write_json,
                         write_jsonl)

log = logging.getLogger(__name__)


class StageError(PulseError):
    """Wraps a failure with the name of the stage it happened in."""

    def __init__(self, stage: str, cause: PulseError):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code


# -- artifact store -----------------------------------------------------------
class ArtifactStore:
    def __init__(self, root: str | Path, force: bool = False):
        self.root = Path(root)
        self.force = force
        self.manifest_path = self.root / "manifest.json"
        self.timings: dict[str, float] = {}

    def path(self, rel: str) -> Path:
        return self.root / rel

    def _manifest(self) -> dict:
        return read_json(self.manifest_path) if self.manifest_path.exists() else {"stages": {}}

    def outputs_hash(self, key: str) -> str:
        rec = self._manifest()["stages"].get(key)
        if rec is None:
            raise ArtifactMismatch(f"stage {key} has not been run in {self.root}")
        return fingerprint(rec["outputs"])

    def stage(self, key: str, fp: str, outputs: Sequence[str], compute: Callable[[], None]) -> bool:
        """Run ``compute`` unless a matching record exists. Returns True when reused."""
        manifest = self._manifest()
        rec = manifest["stages"].get(key)
        if rec is not None and not self.force:
            if rec["fingerprint"] != fp:
                raise ArtifactMismatch(
                    f"stage {key}: configuration or inputs changed since the artifacts in {self.root} "
                    "were produced; use a fresh artifacts directory or --force")
            for rel, digest in rec["outputs"].items():
                p = self.path(rel)
                if not p.exists() or sha256_file(p) != digest:
                    raise ArtifactMismatch(f"stage {key}: output {rel} is missing or was modified")
            log.info("stage %s: reusing artifacts (fingerprint %s)", key, fp)
            return True
        start = time.perf_counter()
        try:
            compute()
        except PulseError as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(key, exc) from exc
        self.timings[key] = round(time.perf_counter() - start, 3)
        manifest = self._manifest()
        manifest["stages"][key] = {"fingerprint": fp,
                                   "outputs": {rel: sha256_file(self.path(rel)) for rel in outputs}}
        write_json(self.manifest_path, manifest)
        timing_path = self.path("reports/timings.json")
        old = read_json(timing_path) if timing_path.exists() else {}
        old.update(self.timings)
        write_json(timing_path, old)
        log.info("stage %s: done (fingerprint %s)", key, fp)
        return False


# -- in-memory bundles ---------------------------------------------------------
@dataclass
class Prepared:
    split: D.DatasetSplit
    catalog: dict[str, D.ItemInfo]
    val_candidates: dict[str, D.CandidateSet]
    test_candidates: dict[str, D.CandidateSet]
    traits: dict | None  # hidden synthetic assignments (oracle checks only)

    @property
    def users(self) -> list[str]:
        return self.split.users


@dataclass
class Rationales:
    positives: dict[str, Rationale]
    behaviors: dict[str, str]
    trees: dict[str, RationaleTree]
    stats: dict


def _holdout(users: Sequence[str], fraction: float, seed: int) -> set[str]:
    k = max(1, int(round(fraction * len(users))))
    rng = np.random.default_rng(derive_seed(seed, "early-stop-holdout"))
    return {users[i] for i in rng.choice(len(users), size=min(k, len(users) - 1), replace=False)}


def selection_anchor(split: D.DatasetSplit, user: str, catalog) -> str:
    """Behavior text of the train prefix, its last item playing the ground truth."""
    prefix = split.train[user].items
    return T.build_behavior_text(prefix[:-1], prefix[-1], catalog)


class Pipeline:
    def __init__(self, cfg: RunConfig, root: str | Path | None = None, force: bool = False,
                 backend=None, sleep=None):
        self.cfg = cfg
        self.store = ArtifactStore(root if root is not None else cfg.artifacts_dir, force)
        self._backend = backend
        self._sleep = sleep
        self._cache: dict = {}

    # -- helpers
    def _fp(self, *parts) -> str:
        return fingerprint([self.cfg.seed, *parts])

    def _out(self, key: str) -> str:
        return self.store.outputs_hash(key)

    def report_fingerprint(self, **extra) -> str:
        cfg = self.cfg.to_dict()
        cfg.pop("artifacts_dir")
        cfg.update(extra)
        return fingerprint(cfg)

    # -- data
    def synth(self) -> None:
        c = self.cfg.data
        if c.source != "synthetic":
            raise InvalidArgument("synth needs data.source == 'synthetic'")
        spec = D.SyntheticSpec(n_users=c.n_users, n_items=c.n_items, n_traits=c.n_traits, noise=c.noise,
                               seq_len_range=(c.seq_len_min, c.seq_len_max), seed=self.cfg.seed,
                               domain=c.domain, item_prefix=c.item_prefix, trait_in_title=c.trait_in_title)
        outputs = ["data/raw.jsonl", "data/traits.json"]

        def compute():
            ds = D.gen_synthetic_dataset(spec)
            D.write_interactions(self.store.path(outputs[0]), ds.records, ds.catalog)
            write_json(self.store.path(outputs[1]), {"traits": list(ds.traits), "users": ds.user_traits,
                                                     "items": ds.item_traits})

        self.store.stage("synth", self._fp("synth", self.cfg.section("data")), outputs, compute)

    def ingest(self) -> Prepared:
        if "prepared" in self._cache:
            return self._cache["prepared"]
        c = self.cfg.data
        if c.source == "synthetic":
            self.synth()
            src, src_hash = self.store.path("data/raw.jsonl"), self._out("synth")
        else:
            src = Path(c.path)
            src_hash = sha256_file(src)
        outputs = ["data/split.jsonl", "data/candidates_validation.jsonl", "data/candidates_test.jsonl",
                   "data/catalog.json", "data/ingest.json"]

        def compute():
            loaded = D.load_interactions(src)
            records = D.preprocess_core(loaded.records, c.core_k)
            seqs = D.build_sequences(records)
            split = D.split_leave_one_out(seqs)
            universe = D.item_universe(loaded.catalog, seqs)
            catalog = {i: loaded.catalog[i] for i in universe}
            D.save_split(self.store.path(outputs[0]), split)
            D.save_candidates(self.store.path(outputs[1]),
                              D.build_candidate_sets(split, "validation", self.cfg.seed, universe))
            D.save_candidates(self.store.path(outputs[2]),
                              D.build_candidate_sets(split, "test", self.cfg.seed, universe))
            D.save_catalog(self.store.path(outputs[3]), catalog)
            write_json(self.store.path(outputs[4]), {"n_valid": loaded.n_valid, "n_skipped": loaded.n_skipped,
                                                     "n_after_core": len(records), "n_users": len(split.users),
                                                     "n_items": len(catalog)})

        self.store.stage("ingest", self._fp("ingest", self.cfg.section("data"), src_hash), outputs, compute)
        traits_path = self.store.path("data/traits.json")
        prepared = Prepared(D.load_split(self.store.path(outputs[0])), D.load_catalog(self.store.path(outputs[3])),
                            D.load_candidates(self.store.path(outputs[1])),
                            D.load_candidates(self.store.path(outputs[2])),
                            read_json(traits_path) if c.source == "synthetic" and traits_path.exists() else None)
        self._cache["prepared"] = prepared
        return prepared

    def input_hash(self) -> str:
        self.ingest()
        return self._out("ingest")

    # -- backbone
    def backbone_config(self) -> bb.BackboneConfig:
        return bb.BackboneConfig(max_len=self.cfg.data.max_len, **self.cfg.section("backbone"))

    def train_backbone(self) -> bb.Backbone:
        if "backbone" in self._cache:
            return self._cache["backbone"]
        prep = self.ingest()
        outdir = "checkpoints/backbone"
        outputs = [f"{outdir}/backbone.ckpt", f"{outdir}/backbone.json", "reports/plots/backbone_curve.csv"]

        def compute():
            res = bb.train_backbone(prep.split, self.backbone_config(), derive_seed(self.cfg.seed, "backbone"),
                                    items=sorted(prep.catalog), val_candidates=prep.val_candidates)
            bb.save_backbone(self.store.path(outdir), res.model)
            rows = [(k + 1, res.train_loss[k], res.val_hr[k]) for k in range(len(res.val_hr))]
            from pulse.utils import write_text
            write_text(self.store.path(outputs[2]), E.curve_csv(("epoch", "train_loss", "val_hr_at_1"), rows))

        self.store.stage("train-backbone", self._fp("backbone", self.cfg.section("backbone"),
                                                    self.cfg.data.max_len, self._out("ingest")), outputs, compute)
        model = bb.load_backbone(self.store.path(outdir))
        model.params.freeze()
        model.params.lock()
        self._cache["backbone"] = model
        return model

    # -- rationales
    def backend(self):
        if self._backend is None:
            r = self.cfg.rationale
            if r.backend == "http":
                kwargs = {"sleep": self._sleep} if self._sleep is not None else {}
                self._backend = HttpBackend(r.base_url, timeout=r.timeout, **kwargs)
            else:
                lexicon = r.mock_lexicon
                if lexicon is None and self.cfg.data.source == "synthetic":
                    lexicon = self.ingest().traits["traits"]
                self._backend = MockBackend(lexicon, drift=r.mock_drift, seed=r.mock_seed)
        return self._backend

    def _rationale_fp(self) -> dict:
        r = self.cfg.section("rationale")
        r.pop("timeout")
        r.pop("max_in_flight")
        r.pop("base_url")
        return r

    def gen_rationales(self) -> Rationales:
        if "rationales" in self._cache:
            return self._cache["rationales"]
        prep = self.ingest()
        model = self.train_backbone()
        outputs = ["rationales/positives.jsonl", "rationales/behaviors.jsonl", "rationales/trees.jsonl",
                   "rationales/generation_stats.json"]

        def compute():
            emb = bb.user_embeddings(model, {u: prep.split.train[u].items for u in prep.users})
            bundle = generate_rationales(prep.split, prep.catalog, emb, self.cfg, self.backend(),
                                         derive_seed(self.cfg.seed, "rationales"))
            write_rationale_bundle(self.store, bundle, outputs)

        self.store.stage("gen-rationales", self._fp("rationales", self._rationale_fp(), self._out("ingest"),
                                                    self._out("train-backbone")), outputs, compute)
        bundle = read_rationale_bundle(self.store, outputs)
        self._cache["rationales"] = bundle
        return bundle

    # -- thought space
    def encoder_config(self) -> T.EncoderConfig:
        t = self.cfg.thought_space
        return T.EncoderConfig(t.hash_vocab_size, t.embed_dim, t.n_layers, t.n_heads, t.shared_weights)

    def ts_config(self) -> T.ThoughtSpaceConfig:
        t = self.cfg.thought_space
        return T.ThoughtSpaceConfig(t.temperature, t.batch_size, t.lr, t.epochs, t.warmup_fraction,
                                    t.weight_decay, t.negatives, derive_seed(self.cfg.seed, "thought-space"))

    def train_ts(self) -> T.ThoughtSpace:
        if "ts" in self._cache:
            return self._cache["ts"]
        bundle = self.gen_rationales()
        outdir = "checkpoints/encoders"
        epochs = self.cfg.thought_space.epochs
        outputs = [f"{outdir}/encoders.ckpt", f"{outdir}/encoders.json", "reports/plots/thought_space_loss.csv"]
        outputs += [f"{outdir}/encoders_epoch{k:03d}.ckpt" for k in range(1, epochs + 1)]

        def compute():
            cfg = self.ts_config()
            ts = T.init_thought_space(self.encoder_config(), cfg.seed,
                                      embedding_table=self.cfg.thought_space.init_embedding_path)
            ts, curve = T.train_thought_space({u: r.text for u, r in bundle.positives.items()},
                                              bundle.behaviors, cfg, ts=ts,
                                              checkpoint_dir=self.store.path(outdir))
            T.save_thought_space(self.store.path(outdir), ts)
            from pulse.utils import write_text
            write_text(self.store.path(outputs[2]),
                       E.curve_csv(("epoch", "loss"), [(k + 1, v) for k, v in enumerate(curve.loss)]))

        self.store.stage("train-ts", self._fp("thought-space", self.cfg.section("thought_space"),
                                              self._out("gen-rationales")), outputs, compute)
        ts = T.load_thought_space(self.store.path(outdir), frozen=True)
        self._cache["ts"] = ts
        return ts

    # -- selection
    def select(self, method: str, tag: str | None = None, scorer: T.ThoughtSpace | None = None,
               scorer_id: str = "thought_space") -> dict[str, dict]:
        method = S.SelectionMethod(method).value
        tag = tag or method
        key = f"select-{tag}"
        if key in self._cache:
            return self._cache[key]
        rel = f"rationales/selected_{tag}.jsonl"
        prep = self.ingest()
        bundle = self.gen_rationales()
        deps = [self._out("gen-rationales")]
        needs_scorer = method == "tot_thought_space"
        if needs_scorer and scorer is None:
            scorer = self.train_ts()
            deps.append(self._out("train-ts"))
        elif needs_scorer:
            deps.append(scorer.checksum())

        def compute():
            rows = select_all(prep.split, prep.catalog, bundle, method, scorer, self.backend(),
                              derive_seed(self.cfg.seed, "select"))
            write_jsonl(self.store.path(rel), (rows[u] for u in sorted(rows)))

        self.store.stage(key, self._fp("select", method, scorer_id, deps), [rel], compute)
        out = {row["user_id"]: row for row in read_jsonl(self.store.path(rel))}
        self._cache[key] = out
        return out

    # -- scoring head
    def sft_config(self) -> S.SftConfig:
        s = self.cfg.section("sft")
        for k in ("method", "early_stop_fraction"):
            s.pop(k)
        return S.SftConfig(**s)

    def features(self) -> S.FeatureEncoder:
        if "features" not in self._cache:
            sc = self.sft_config()
            self._cache["features"] = S.FeatureEncoder(self.train_ts(), self.ingest().catalog,
                                                       sc.candidate_encoder, sc.history_encoder)
        return self._cache["features"]

    def examples(self, method: str, selected: dict[str, dict] | None):
        prep = self.ingest()
        texts = None if selected is None else {u: r["text"] for u, r in selected.items()}
        hold = _holdout(prep.users, self.cfg.sft.early_stop_fraction, self.cfg.seed)
        fit_users = [u for u in prep.users if u not in hold]
        hist_train = {u: prep.split.train[u].items for u in prep.users}
        hist_test = {u: prep.split.test[u][0].items for u in prep.users}
        fit = S.build_sft_dataset(hist_train, prep.val_candidates, texts, method, fit_users)
        val = S.build_sft_dataset(hist_train, prep.val_candidates, texts, method, sorted(hold))
        test = S.build_sft_dataset(hist_test, prep.test_candidates, texts, method, prep.users)
        return fit, val, test

    def train_sft(self, method: str, tag: str | None = None, **select_kw) -> ParamStore:
        method = S.SelectionMethod(method).value
        tag = tag or method
        key = f"sft-{tag}"
        if key in self._cache:
            return self._cache[key]
        selected = None if method == "none" else self.select(method, tag, **select_kw)
        ts = self.train_ts()
        fe = self.features()
        outdir = f"checkpoints/sft_{tag}"
        outputs = [f"{outdir}/head.ckpt", f"reports/plots/sft_{tag}_curve.csv"]
        deps = [self._out("ingest"), self._out("train-ts")]
        if selected is not None:
            deps.append(self._out(f"select-{tag}"))
        sc = self.sft_config()

        def compute():
            before = ts.checksum()
            fit, val, _ = self.examples(method, selected)
            res = S.train_sft(fe.batch(fit), [e.label for e in fit], sc, derive_seed(self.cfg.seed, "sft"),
                              fe.batch(val), [e.label for e in val])
            if ts.checksum() != before:
                raise ProtocolViolation("encoder parameters changed during head training")
            res.head.save(self.store.path(outputs[0]))
            from pulse.utils import write_text
            rows = [(k + 1, res.train_loss[k], res.val_hr[k]) for k in range(len(res.val_hr))]
            write_text(self.store.path(outputs[1]), E.curve_csv(("epoch", "train_loss", "val_hr_at_1"), rows))

        self.store.stage(key, self._fp("sft", dataclasses.asdict(sc), self.cfg.sft.early_stop_fraction,
                                       method, deps), outputs, compute)
        head = ParamStore.load(self.store.path(outputs[0]))
        head.freeze()
        head.lock()
        self._cache[key] = head
        return head

    def evaluate(self, method: str, tag: str | None = None, experiment: str | None = None,
                 **select_kw) -> E.MetricsReport:
        method = S.SelectionMethod(method).value
        tag = tag or method
        head = self.train_sft(method, tag, **select_kw)
        selected = None if method == "none" else self.select(method, tag, **select_kw)
        rel = f"reports/predictions_{tag}.jsonl"

        def compute():
            _, _, test = self.examples(method, selected)
            preds = S.predict(head, test, self.features().batch(test))
            S.write_predictions(self.store.path(rel), preds)

        self.store.stage(f"eval-{tag}", self._fp("eval", self._out(f"sft-{tag}")), [rel], compute)
        pairs = [(r["predicted_index"], r["ground_truth_index"]) for r in read_jsonl(self.store.path(rel))]
        report = E.make_report(experiment or self.cfg.eval.experiment, self.dataset_id(), tag, pairs,
                               self.cfg.seed, self.report_fingerprint(method=tag), self.input_hash(),
                               {"reference": E.REFERENCE.get(experiment or "main", {}),
                                "recount_hr_at_1": E.recount_hr_at_1(self.store.path(rel))})
        return report

    def dataset_id(self) -> str:
        c = self.cfg.data
        return f"synthetic-{c.domain}" if c.source == "synthetic" else Path(c.path).stem

    def project(self) -> Path:
        prep = self.ingest()
        bundle = self.gen_rationales()
        ts = self.train_ts()
        rel = "reports/projection.csv"

        def compute():
            negs = T.sample_rationale_negatives(prep.users, 1, derive_seed(self.cfg.seed, "projection"))
            vecs, labels, ids = [], [], []
            for u in prep.users:
                for lab, vec in (("anchor", ts.encode_behavior(bundle.behaviors[u])),
                                 ("positive", ts.encode_rationale(bundle.positives[u].text)),
                                 ("negative", ts.encode_rationale(bundle.positives[negs[u][0]].text))):
                    vecs.append(vec)
                    labels.append(lab)
                    ids.append(u)
            T.project_embeddings_2d(np.stack(vecs), labels, ids, self.store.path(rel))

        self.store.stage("project", self._fp("project", self._out("train-ts")), [rel], compute)
        return self.store.path(rel)


# -- stage bodies (usable without an artifact store) --------------------------------
def make_context(split: D.DatasetSplit, user: str, catalog, cfg: RunConfig) -> PromptContext:
    return PromptContext(split.train[user], catalog, cfg.rationale.include_history_in_refine)


def generate_rationales(split: D.DatasetSplit, catalog, embeddings: dict[str, np.ndarray], cfg: RunConfig,
                        backend, seed: int, users: Sequence[str] | None = None) -> Rationales:
    """Phase I positives plus one base reason and refinement tree per user."""
    r = cfg.rationale
    users = list(users) if users is not None else split.users
    positives, behaviors, trees = {}, {}, {}
    tree_calls: dict[str, int] = {}
    for user in users:
        prefix = split.train[user]
        anchor_hist = prefix.prefix(len(prefix) - 1)
        gt = prefix.items[-1]
        prompt = build_phase1_prompt(anchor_hist, gt, catalog)
        resp = generate(backend, GenerationRequest(prompt, r.max_tokens, r.temperature,
                                                   derive_seed(seed, "positive", user)))
        positives[user] = rationale_from_text(resp.text, "positive", user, logprob=resp.logprob)
        ratings = anchor_hist.ratings if cfg.thought_space.append_ratings else None
        behaviors[user] = T.build_behavior_text(anchor_hist.items, gt, catalog, ratings)

        similar = bb.similar_users(user, embeddings, r.similar_k).users if user in embeddings else []
        sim_items = [i for v in similar for i in split.train[v].items]
        if not sim_items:
            sim_items = list(prefix.items)
        prompt = build_phase2_prompt(prefix, sim_items, catalog)
        resp = generate(backend, GenerationRequest(prompt, r.max_tokens, r.temperature,
                                                   derive_seed(seed, "base", user)))
        base = rationale_from_text(resp.text, "base", user, logprob=resp.logprob)
        counter = CountingBackend(backend)
        trees[user] = expand_tot(base, r.n, r.m, counter, derive_seed(seed, "tot"),
                                 make_context(split, user, catalog, cfg), r.max_in_flight,
                                 r.max_tokens, r.temperature)
        tree_calls[user] = counter.calls
    stats = {"tree_calls": tree_calls, "expected_tree_calls": r.n + r.n * r.m,
             "backend": getattr(backend, "name", "unknown"),
             "retries": int(getattr(backend, "retries", 0))}
    return Rationales(positives, behaviors, trees, stats)


def write_rationale_bundle(store: ArtifactStore, bundle: Rationales, outputs: Sequence[str]) -> None:
    users = sorted(bundle.positives)
    save_rationales(store.path(outputs[0]), (bundle.positives[u] for u in users))
    write_jsonl(store.path(outputs[1]), ({"user_id": u, "text": bundle.behaviors[u]} for u in users))
    save_trees(store.path(outputs[2]), bundle.trees)
    stats = dict(bundle.stats)
    stats.pop("retries", None)  # depends on server behavior, not on inputs
    write_json(store.path(outputs[3]), stats)


def read_rationale_bundle(store: ArtifactStore, outputs: Sequence[str]) -> Rationales:
    positives = {r.source_user: r for r in load_rationales(store.path(outputs[0]))}
    behaviors = {d["user_id"]: d["text"] for d in read_jsonl(store.path(outputs[1]))}
    trees = load_trees(store.path(outputs[2]))
    return Rationales(positives, behaviors, trees, read_json(store.path(outputs[3])))


def select_all(split: D.DatasetSplit, catalog, bundle: Rationales, method: str,
               scorer: T.ThoughtSpace | None, backend, seed: int) -> dict[str, dict]:
    method = S.SelectionMethod(method)
    out = {}
    for user in sorted(bundle.trees):
        tree = bundle.trees[user]
        if method is S.SelectionMethod.BASE_REASON:
            out[user] = {"user_id": user, "text": tree.root.text, "score": None, "tree_pos": None}
            continue
        if method is S.SelectionMethod.TOT_THOUGHT_SPACE:
            sel = T.select_best_rationale(tree, selection_anchor(split, user, catalog), scorer)
        elif method is S.SelectionMethod.TOT_LOGLIK:
            sel = S.ll_select(tree, backend)
        elif method is S.SelectionMethod.TOT_RANDOM:
            sel = S.random_select(tree, seed)
        else:
            raise InvalidArgument(f"method {method.value} does not select rationales")
        score = None if math.isnan(sel.score) else round(sel.score, 8)
        out[user] = {"user_id": user, "text": sel.leaf.text, "score": score, "tree_pos": [2, sel.i, sel.j]}
    return out


# -- experiments ----------------------------------------------------------------------
def run_experiment(cfg: RunConfig, root: str | Path | None = None, force: bool = False,
                   backend=None) -> E.MetricsReport:
    """Full pipeline for ``cfg.sft.method``; writes reports/report.{json,csv}."""
    pipe = Pipeline(cfg, root, force, backend)
    report = pipe.evaluate(cfg.sft.method, experiment=cfg.eval.experiment)
    E.emit_report([report], pipe.store.path("reports"), "report")
    return report


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def check_arms(arm_configs: dict[str, dict], varied: str, shared: dict[str, str]) -> None:
    """Arms must differ in exactly the ``varied`` key and agree on every shared artifact hash."""
    flat = {arm: _flatten(c) for arm, c in arm_configs.items()}
    keys = set().union(*(f.keys() for f in flat.values()))
    differing = {k for k in keys if len({repr(f.get(k)) for f in flat.values()}) > 1}
    if len(arm_configs) > 1 and differing != {varied}:
        raise AblationContaminated(f"ablation arms differ in {sorted(differing)}, expected only {varied}")
    if len(set(shared.values())) > 1:
        raise AblationContaminated(f"shared artifacts differ across arms: {shared}")


def run_ablation_b(cfg: RunConfig, root: str | Path | None = None, force: bool = False,
                   backend=None) -> list[E.MetricsReport]:
    """Same trees, encoders, slates and head recipe; only the rationale fed to the head varies."""
    pipe = Pipeline(cfg, root, force, backend)
    arms = list(cfg.eval.ablation_b_arms)
    configs = {}
    for arm in arms:
        c = cfg.to_dict()
        c["sft"]["method"] = arm
        configs[arm] = c
    pipe.gen_rationales()
    reports, shared = [], {}
    for arm in arms:
        reports.append(pipe.evaluate(arm, experiment="ablation_b"))
        shared[arm] = fingerprint([pipe._out("ingest"), pipe._out("gen-rationales"), pipe._out("train-ts")])
    check_arms(configs, "sft.method", shared)
    E.emit_report(reports, pipe.store.path("reports"), "ablation_b")
    return reports


def external_vector_space(path: str | Path) -> T.ThoughtSpace:
    """Bag-of-vectors encoder from an external token table: mean of rows, normalized."""
    table = np.load(path)
    cfg = T.EncoderConfig(table.shape[0], table.shape[1], 0, 1, True)
    ts = T.init_thought_space(cfg, 0, embedding_table=table)
    ts.params.set("e1.proj.w", np.eye(table.shape[1], dtype=np.float32))
    ts.freeze()
    return ts


def run_ablation_a(cfg: RunConfig, root: str | Path | None = None, force: bool = False,
                   backend=None) -> list[E.MetricsReport]:
    """Vary only the space used to score tree leaves; features and heads stay identical."""
    pipe = Pipeline(cfg, root, force, backend)
    trained = pipe.train_ts()
    arms = list(cfg.eval.ablation_a_arms)
    if "external_vectors" in arms and not cfg.eval.external_vectors_path:
        raise InvalidArgument("ablation arm external_vectors needs eval.external_vectors_path")
    scorers = {}
    for arm in arms:
        if arm == "thought_space":
            scorers[arm] = trained
        elif arm == "frozen_generic":
            generic = T.init_thought_space(pipe.encoder_config(), derive_seed(cfg.seed, "frozen-generic"))
            generic.freeze()
            scorers[arm] = generic
        else:
            scorers[arm] = external_vector_space(cfg.eval.external_vectors_path)
    configs, shared, reports = {}, {}, []
    for arm in arms:
        c = cfg.to_dict()
        c["scoring_space"] = arm
        configs[arm] = c
        reports.append(pipe.evaluate("tot_thought_space", tag=f"space_{arm}", experiment="ablation_a",
                                     scorer=scorers[arm], scorer_id=arm))
        shared[arm] = fingerprint([sha256_file(pipe.store.path("data/candidates_test.jsonl")),
                                   sha256_file(pipe.store.path("data/candidates_validation.jsonl")),
                                   pipe._out("gen-rationales"), pipe._out("train-ts")])
    check_arms(configs, "scoring_space", shared)
    E.emit_report(reports, pipe.store.path("reports"), "ablation_a")
    return reports


def target_config(cfg: RunConfig) -> RunConfig:
    t = dataclasses.replace(cfg.data, domain=cfg.eval.target_domain, item_prefix=cfg.eval.target_item_prefix,
                            n_users=cfg.eval.target_n_users, source="synthetic", path=None)
    return dataclasses.replace(cfg, data=t, seed=cfg.seed + cfg.eval.target_seed_offset)


@dataclass
class CrossDomainResult:
    pulse: E.MetricsReport
    backbone_only: E.MetricsReport
    steps_before: dict[str, int]
    steps_after: dict[str, int]


def run_cross_domain(cfg: RunConfig, root: str | Path | None = None, force: bool = False,
                     backend=None) -> CrossDomainResult:
    """Source-trained backbone, encoders and head evaluated on a disjoint-item target domain.

    Nothing is trained on the target: every source store is locked, and step
    counters are compared before and after.
    """
    src = Pipeline(cfg, root, force, backend)
    method = "tot_thought_space"
    head = src.train_sft(method)
    ts = src.train_ts()
    model = src.train_backbone()
    stores = {"backbone": model.params, "encoders": ts.params, "head": head}
    for s in stores.values():
        s.freeze()
        s.lock()
    before = {k: s.step_count for k, s in stores.items()}
    sums = {k: s.checksum() for k, s in stores.items()}

    tcfg = target_config(cfg)
    tgt = Pipeline(tcfg, src.store.path("cross_domain"), force, backend)
    prep = tgt.ingest()
    overlap = set(prep.catalog) & set(model.items)
    if overlap:
        raise InvalidArgument(f"target items overlap the source vocabulary ({len(overlap)} shared ids)")
    outputs = ["rationales/positives.jsonl", "rationales/behaviors.jsonl", "rationales/trees.jsonl",
               "rationales/generation_stats.json"]

    def gen():
        # backbone embeddings are meaningless for unseen items; neighbors come from E2 instead
        emb = {u: ts.encode_behavior(T.history_text(prep.split.train[u].items, prep.catalog))
               for u in prep.users}
        bundle = generate_rationales(prep.split, prep.catalog, emb, tcfg, tgt.backend(),
                                     derive_seed(tcfg.seed, "rationales"))
        write_rationale_bundle(tgt.store, bundle, outputs)

    tgt.store.stage("gen-rationales", tgt._fp("rationales", tgt._rationale_fp(), tgt._out("ingest"),
                                              sums["encoders"]), outputs, gen)
    bundle = read_rationale_bundle(tgt.store, outputs)
    rel_sel = "rationales/selected_tot_thought_space.jsonl"

    def sel():
        rows = select_all(prep.split, prep.catalog, bundle, method, ts, tgt.backend(), 0)
        write_jsonl(tgt.store.path(rel_sel), (rows[u] for u in sorted(rows)))

    tgt.store.stage("select-tot_thought_space", tgt._fp("select", tgt._out("gen-rationales"), sums["encoders"]),
                    [rel_sel], sel)
    texts = {d["user_id"]: d["text"] for d in read_jsonl(tgt.store.path(rel_sel))}
    hist = {u: prep.split.test[u][0].items for u in prep.users}
    test = S.build_sft_dataset(hist, prep.test_candidates, texts, method, prep.users)
    fe = S.FeatureEncoder(ts, prep.catalog, src.sft_config().candidate_encoder, src.sft_config().history_encoder)
    preds = S.predict(head, test, fe.batch(test))
    rel_pred = "reports/predictions_pulse_transfer.jsonl"
    rel_bb = "reports/predictions_backbone_transfer.jsonl"
    S.write_predictions(tgt.store.path(rel_pred), preds)
    bb_preds = []
    for u in prep.users:
        cs = prep.test_candidates[u]
        logits = bb.score_candidates(model, hist[u], cs.candidates)
        bb_preds.append(S.Prediction(u, int(np.argmax(logits)), cs.ground_truth_index,
                                     tuple(float(x) for x in logits)))
    S.write_predictions(tgt.store.path(rel_bb), bb_preds)

    after = {k: s.step_count for k, s in stores.items()}
    if after != before or any(s.checksum() != sums[k] for k, s in stores.items()):
        raise ProtocolViolation("a source parameter changed during cross-domain evaluation")
    meta = {"reference": E.REFERENCE["cross_domain"], "source_dataset": src.dataset_id(),
            "optimizer_steps_on_target": 0}
    input_hash = tgt.input_hash()
    fp = src.report_fingerprint(target=tcfg.data.domain)
    pulse_rep = E.make_report("cross_domain", tgt.dataset_id(), "pulse_transfer",
                              [(p.predicted_index, p.ground_truth_index) for p in preds], cfg.seed, fp,
                              input_hash, {**meta, "recount_hr_at_1": E.recount_hr_at_1(tgt.store.path(rel_pred))})
    bb_rep = E.make_report("cross_domain", tgt.dataset_id(), "backbone_only_transfer",
                           [(p.predicted_index, p.ground_truth_index) for p in bb_preds], cfg.seed, fp,
                           input_hash, {**meta, "recount_hr_at_1": E.recount_hr_at_1(tgt.store.path(rel_bb))})
    E.emit_report([pulse_rep, bb_rep], src.store.path("reports"), "cross_domain")
    return CrossDomainResult(pulse_rep, bb_rep, before, after)
