#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <tuple>

#include "dml/eval.hpp"
#include "oracles.hpp"

using namespace dml;

namespace {

ReferenceSet one_dim(const std::vector<std::pair<double, ClassId>>& pts) {
    ReferenceSet ref;
    ref.embeddings = Matrix(pts.size(), 1);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        ref.embeddings(i, 0) = pts[i].first;
        ref.labels.push_back(pts[i].second);
    }
    return ref;
}

}  // namespace

TEST(Knn, IdenticalPointKOne) {
    const ReferenceSet ref = one_dim({{0.0, 3}, {1.0, 5}, {2.0, 7}});
    const std::vector<double> q{1.0};
    EXPECT_EQ(knn_predict(q, ref, 1).label, 5);
}

TEST(Knn, HandEnumeratedSevenNeighbours) {
    const ReferenceSet ref = one_dim({{0.0, 0}, {0.1, 0}, {0.2, 0}, {0.3, 0}, {1.0, 1}, {1.1, 1}, {1.2, 1}});
    const std::vector<double> q{0.15};
    const KnnResult r = knn_predict(q, ref, 7);
    EXPECT_EQ(r.label, 0);
    ASSERT_EQ(r.neighbors.size(), 7u);
    // 0.1 and 0.2 are both 0.05 away; the lower index comes first.
    EXPECT_EQ(r.neighbors[0], 1u);
    EXPECT_EQ(r.neighbors[1], 2u);
    EXPECT_EQ(r.neighbors[6], 6u);
}

TEST(Knn, VoteTieGoesToSmallerSummedDistance) {
    // K = 7 over three classes: 3 / 3 / 1. Class 2 sits closer in total.
    const ReferenceSet ref = one_dim({{1.0, 1}, {1.1, 1}, {1.2, 1}, {-0.5, 2}, {-0.6, 2}, {-0.7, 2}, {0.9, 0}});
    const std::vector<double> q{0.0};
    EXPECT_EQ(knn_predict(q, ref, 7).label, 2);
}

TEST(Knn, FullTieGoesToLowerClassId) {
    const ReferenceSet ref = one_dim({{1.0, 4}, {-1.0, 2}});
    const std::vector<double> q{0.0};
    EXPECT_EQ(knn_predict(q, ref, 2).label, 2);
}

TEST(Knn, Preconditions) {
    const ReferenceSet empty;
    const std::vector<double> q{0.0};
    EXPECT_THROW(knn_predict(q, empty, 1), std::invalid_argument);
    const ReferenceSet ref = one_dim({{0.0, 0}, {1.0, 1}});
    EXPECT_THROW(knn_predict(q, ref, 3), std::invalid_argument);
    EXPECT_THROW(knn_predict(q, ref, 0), std::invalid_argument);
    const std::vector<double> q2{0.0, 1.0};
    EXPECT_THROW(knn_predict(q2, ref, 1), std::invalid_argument);
}

TEST(Knn, MatchesBruteForceOracleIncludingTies) {
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        RngStream rng(seed, 31);
        const std::size_t m = 1 + rng.uniform_index(200);
        const std::size_t dim = 1 + rng.uniform_index(4);
        const int classes = 2 + static_cast<int>(rng.uniform_index(5));
        // Integer grids produce plenty of distance and vote ties.
        const bool grid = seed % 2 == 0;
        ReferenceSet ref;
        ref.embeddings = Matrix(m, dim);
        for (double& v : ref.embeddings.data()) v = grid ? static_cast<double>(rng.uniform_index(4)) : rng.normal();
        for (std::size_t i = 0; i < m; ++i) ref.labels.push_back(static_cast<ClassId>(rng.uniform_index(classes)));
        const std::size_t k = 1 + rng.uniform_index(std::min<std::size_t>(m, 15));
        for (int trial = 0; trial < 5; ++trial) {
            std::vector<double> q(dim);
            for (double& v : q) v = grid ? static_cast<double>(rng.uniform_index(4)) : rng.normal();
            std::vector<std::size_t> expected_neighbors;
            const ClassId expected = oracle::knn(q, ref, k, &expected_neighbors);
            const KnnResult got = knn_predict(q, ref, k);
            ASSERT_EQ(got.label, expected) << "seed " << seed;
            ASSERT_EQ(got.neighbors, expected_neighbors) << "seed " << seed;
        }
    }
}

TEST(RankK, Definition) {
    const std::vector<ClassId> nb{3, 1, 1, 2, 0, 4, 4};
    EXPECT_TRUE(rank_k_hit(3, nb, 1));
    EXPECT_TRUE(rank_k_hit(3, nb, 5));
    EXPECT_FALSE(rank_k_hit(4, nb, 5));
    EXPECT_TRUE(rank_k_hit(4, nb, 6));
    EXPECT_FALSE(rank_k_hit(9, nb, 7));
}

TEST(Metrics, PerfectPredictions) {
    const std::vector<ClassId> t{0, 1, 2, 2};
    const std::vector<std::vector<ClassId>> nb{{0, 1}, {1, 0}, {2, 2}, {2, 1}};
    const std::size_t ranks[] = {1, 2};
    const EvalReport r = compute_metrics(t, t, nb, {1}, 3, ranks);
    EXPECT_EQ(r.recall_micro, 1.0);
    EXPECT_EQ(r.recall_macro, 1.0);
    EXPECT_EQ(r.recall_macro_rare, 1.0);
    EXPECT_EQ(r.rank_k.at(1), 1.0);
    EXPECT_EQ(r.rank_k.at(2), 1.0);
}

TEST(Metrics, HandConfusion) {
    const std::vector<ClassId> truth{0, 0, 0, 1};
    const std::vector<ClassId> pred{0, 0, 1, 1};
    const EvalReport r = compute_metrics(pred, truth, {}, {1}, 2);
    EXPECT_NEAR(r.recall_micro, 3.0 / 4.0, 1e-15);
    EXPECT_NEAR(r.recall_macro, 5.0 / 6.0, 1e-15);
    ASSERT_TRUE(r.recall_macro_rare.has_value());
    EXPECT_EQ(*r.recall_macro_rare, 1.0);
    EXPECT_EQ(r.confusion, (std::vector<std::vector<std::size_t>>{{2, 1}, {0, 1}}));
    EXPECT_TRUE(r.rank_k.empty());
}

TEST(Metrics, AbsentClassesSkippedAndRareOptional) {
    const std::vector<ClassId> truth{0, 2};
    const std::vector<ClassId> pred{0, 0};
    const EvalReport r = compute_metrics(pred, truth, {}, {1}, 4);
    EXPECT_EQ(r.recall_macro, 0.5);
    EXPECT_FALSE(r.recall_macro_rare.has_value());
    EXPECT_FALSE(r.per_class_recall.contains(1));
}

TEST(Metrics, Errors) {
    const std::vector<ClassId> a{0, 1};
    const std::vector<ClassId> b{0};
    EXPECT_THROW(compute_metrics(a, b, {}, {}, 2), std::invalid_argument);
    EXPECT_THROW(compute_metrics(b, b, {}, {}, 0), std::invalid_argument);
    const std::vector<ClassId> none;
    EXPECT_THROW(compute_metrics(none, none, {}, {}, 2), std::invalid_argument);
}

TEST(Metrics, RandomInstanceProperties) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        RngStream rng(seed, 77);
        const std::size_t n = 5 + rng.uniform_index(60);
        const std::size_t classes = 2 + rng.uniform_index(6);
        std::vector<ClassId> truth(n), pred(n);
        std::vector<std::vector<ClassId>> nb(n);
        for (std::size_t i = 0; i < n; ++i) {
            truth[i] = static_cast<ClassId>(rng.uniform_index(classes));
            pred[i] = rng.bernoulli(0.6) ? truth[i] : static_cast<ClassId>(rng.uniform_index(classes));
            for (int j = 0; j < 7; ++j) nb[i].push_back(static_cast<ClassId>(rng.uniform_index(classes)));
        }
        const std::size_t ks[] = {1, 2, 3, 4, 5, 6, 7};
        const EvalReport r = compute_metrics(pred, truth, nb, {0}, classes, ks);

        std::size_t trace = 0, total = 0, correct = 0;
        for (std::size_t c = 0; c < classes; ++c) {
            trace += r.confusion[c][c];
            for (std::size_t v : r.confusion[c]) total += v;
        }
        for (std::size_t i = 0; i < n; ++i) correct += pred[i] == truth[i];
        EXPECT_NEAR(r.recall_micro, static_cast<double>(trace) / total, 1e-12);
        EXPECT_NEAR(r.recall_micro, static_cast<double>(correct) / n, 1e-12);

        double prev = 0.0;
        for (const auto& [k, v] : r.rank_k) {
            EXPECT_GE(v, prev);
            prev = v;
        }

        // Duplicating every sample of one class leaves macro recall alone.
        const ClassId dup = truth[0];
        std::vector<ClassId> truth2 = truth, pred2 = pred;
        for (std::size_t i = 0; i < n; ++i) {
            if (truth[i] == dup) {
                truth2.push_back(truth[i]);
                pred2.push_back(pred[i]);
            }
        }
        const EvalReport r2 = compute_metrics(pred2, truth2, {}, {0}, classes);
        EXPECT_NEAR(r2.recall_macro, r.recall_macro, 1e-12);
    }
}

namespace {

// Constant-intensity volumes. With zero biases every activation scales with
// the intensity, so the pre-head output lies on a ray ordered by class.
Dataset constant_dataset() {
    Dataset ds;
    ds.class_count = 4;
    std::vector<ClassId> labels;
    for (ClassId c = 0; c < 4; ++c) {
        for (int i = 0; i < 10; ++i) labels.push_back(c);
    }
    RngStream rng(2);
    const auto splits = stratified_split(labels, rng);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double level = 0.2 + 0.2 * labels[i] + 0.001 * static_cast<double>(i % 10);
        ds.samples.push_back({"s" + std::to_string(i), Volume({8, 8, 8}, level), std::nullopt, labels[i], splits[i]});
    }
    ds.validate();
    return ds;
}

EncoderConfig tiny(HeadMode head, std::size_t embed_dim) {
    EncoderConfig cfg;
    cfg.input_shape = {8, 8, 8};
    cfg.conv_blocks = {{2, 3, 2}};
    cfg.hidden_dim = 8;
    cfg.embed_dim = embed_dim;
    cfg.head_mode = head;
    return cfg;
}

}  // namespace

TEST(EvaluateModel, SeparableDatasetGivesPerfectRecall) {
    const Dataset ds = constant_dataset();
    const EncoderParams params = init_params(tiny(HeadMode::logits, 4), RngStream(5));
    const EvalReport r = evaluate_model(params, ds, 1, {3});
    EXPECT_EQ(r.recall_micro, 1.0);
    EXPECT_EQ(r.recall_macro, 1.0);
    EXPECT_EQ(r.recall_macro_rare, 1.0);
    EXPECT_EQ(r.query_count, ds.indices(Split::test).size());
    EXPECT_EQ(r.reference_count, ds.samples.size() - r.query_count);
    EXPECT_TRUE(r.acc_clf.has_value());
}

TEST(EvaluateModel, DeterministicAndHeadSpecificFields) {
    const Dataset ds = constant_dataset();
    const EncoderParams params = init_params(tiny(HeadMode::l2_normalized, 3), RngStream(8));
    const EvalReport a = evaluate_model(params, ds, 7, {0});
    const EvalReport b = evaluate_model(params, ds, 7, {0});
    EXPECT_EQ(report_to_json(a), report_to_json(b));
    EXPECT_FALSE(a.acc_clf.has_value());
    EXPECT_EQ(report_to_json(a).find("acc_clf"), std::string::npos);
    EXPECT_TRUE(a.rank_k.contains(5));

    const EncoderParams wrong = init_params(tiny(HeadMode::logits, 3), RngStream(8));
    EXPECT_THROW(evaluate_model(wrong, ds, 7, {}), std::invalid_argument);
}

TEST(Report, JsonFixedSixDecimalsAndRoundTrip) {
    const std::vector<ClassId> truth{0, 0, 0, 1};
    const std::vector<ClassId> pred{0, 0, 1, 1};
    const std::vector<std::vector<ClassId>> nb{{0, 1}, {1, 0}, {1, 1}, {1, 0}};
    EvalReport r = compute_metrics(pred, truth, nb, {1}, 2);
    r.acc_clf = 0.5;
    r.seeds = {1, 2};
    const std::string text = report_to_json(r);
    EXPECT_NE(text.find("\"recall_micro\": 0.750000"), std::string::npos) << text;
    EXPECT_NE(text.find("\"recall_macro\": 0.833333"), std::string::npos) << text;
    EXPECT_NE(text.find("\"recall_macro_rare\": 1.000000"), std::string::npos) << text;
    EXPECT_LT(text.find("recall_micro"), text.find("recall_macro"));
    const EvalReport back = report_from_json(text);
    EXPECT_EQ(report_to_json(back), text);
    EXPECT_EQ(back.confusion, r.confusion);
    EXPECT_EQ(back.rare, r.rare);
}

TEST(Report, TableLayout) {
    EvalReport ce;
    ce.recall_micro = 0.435;
    ce.recall_macro = 0.241;
    ce.recall_macro_rare = 0.0588;
    ce.rank_k[5] = 0.561;
    ce.acc_clf = 0.44;
    EvalReport bh = ce;
    bh.acc_clf.reset();
    bh.recall_macro_rare.reset();
    const std::string t = format_table({{"-", "-", "CrossEntropy", ce}, {"BHTriplet", "Yes", "BHTriplet", bh}});
    EXPECT_NE(t.find("Contrastive Loss"), std::string::npos);
    EXPECT_NE(t.find("Recall*_M"), std::string::npos);
    EXPECT_NE(t.find("0.059"), std::string::npos);
    std::vector<std::string> lines;
    std::size_t pos = 0;
    while (pos < t.size()) {
        const std::size_t nl = t.find('\n', pos);
        lines.push_back(t.substr(pos, nl - pos));
        pos = nl + 1;
    }
    ASSERT_EQ(lines.size(), 4u);
    for (const auto& l : lines) EXPECT_EQ(l.size(), lines[0].size());
    EXPECT_EQ(lines[3].substr(lines[3].size() - 1), "-");
}
