"""The three classification heads and span-exact scoring on one episode.

Embeds an episode with a freshly initialized toy encoder, classifies query
tokens with ProtoNet, NNShot, and the multi-NOTA-vector variant, then
decodes spans and scores them.
"""

import numpy as np

from epiarg import (
    EncoderConfig,
    HeadConfig,
    SamplerConfig,
    aggregate,
    build_mnav_prototypes,
    chunk_document,
    compute_prototypes,
    decode_spans,
    embed_tokens,
    mnav_classify,
    nnshot_classify,
    protonet_classify,
    sample_episode,
    score_episode,
)
from epiarg.evaluation import fp_fn_analysis, labels_to_strings
from epiarg.heads import io_labels, kmeans_nota
from epiarg.seeds import substream
from epiarg.synthetic import separable_corpus
from epiarg.trainer import initialize_params

corpus, _ = separable_corpus(11)
encoder_cfg = EncoderConfig(d_emb=32, d_model=32, radius=1, n_buckets=2048, chunk_length=256)
params = initialize_params(encoder_cfg, HeadConfig("nnshot", d_reduced=8), substream(1, "init"))

episode = sample_episode(corpus, SamplerConfig(n_ways=3, d_docs=2, seed=3), substream(3, "demo"))
print("active types:", episode.active_types)


def embed(doc):
    return embed_tokens(params.encoder, doc, chunk_document(len(doc.tokens), 256)).rows


support = [(embed(d), io_labels(len(d.tokens), d.arguments, episode.active_types)) for d in episode.support]
query_doc = episode.query[0]
query = embed(query_doc)
gold_int = io_labels(len(query_doc.tokens), query_doc.arguments, episode.active_types)
gold = labels_to_strings(gold_int, episode.active_types)

# --- 1. prototypes and ProtoNet --------------------------------------------
protos = compute_prototypes(support, episode.active_types)
print("\nprototype norms:", np.linalg.norm(protos.matrix, axis=1).round(3))
assignment = protonet_classify(protos, query)
pred = labels_to_strings(assignment.labels, episode.active_types)
print("protonet spans:", sorted(decode_spans(pred)))
print("gold spans:    ", sorted(decode_spans(gold)))

# --- 2. NNShot in a reduced space -------------------------------------------
reduced_support = [(mat @ params.reducer, lab) for mat, lab in support]
nn = nnshot_classify(reduced_support, query @ params.reducer, n_types=3)
print("\nnnshot spans:  ", sorted(decode_spans(labels_to_strings(nn.labels, episode.active_types))))

# --- 3. multiple NOTA vectors via k-means ------------------------------------
o_rows = np.vstack([mat[lab == 3] for mat, lab in support])
km = kmeans_nota(o_rows, k=4, seed=0)
print(f"\nk-means over {o_rows.shape[0]} O tokens: inertia {km.inertia_history[0]:.3f} -> {km.inertia:.3f}")
mnav_protos = build_mnav_prototypes(support, episode.active_types, k=4, seed=0)
mn = mnav_classify(mnav_protos, query)
print("mnav spans:    ", sorted(decode_spans(labels_to_strings(mn.labels, episode.active_types))))

# --- 4. span-exact scoring ----------------------------------------------------
counts = score_episode([decode_spans(pred)], [decode_spans(gold)], episode.active_types)
report = aggregate(counts)
fp, fn = fp_fn_analysis(pred, gold)
print(
    f"\nuntrained protonet: macro P {report.macro_precision:.1f} R {report.macro_recall:.1f} "
    f"F1 {report.macro_f1:.1f}; token FP {fp:.1f}% FN {fn:.1f}%"
)
print("(untrained encoders stay far below the trained runs in demo 04)")
