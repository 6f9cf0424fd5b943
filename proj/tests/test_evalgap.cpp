// Accuracy and gap measurement contracts: exact-match arithmetic, the gap
// identity, read-only evaluation, decode invariances, forgetting deltas, and
// byte-deterministic metrics artifacts.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include <opdlab/trainer.hpp>

using namespace opdlab;

namespace {

ModelConfig micro_cfg() {
    ModelConfig m;
    m.vocab_size = 8;
    m.d_model = 8;
    m.n_layers = 1;
    m.d_ff = 16;
    m.max_ctx = 48;
    m.init_std = 0.4;
    return m;
}

Triplet make_triplet(int id, std::vector<int> global, std::vector<int> crop, std::vector<int> q,
                     std::vector<int> gt) {
    Triplet t;
    t.id = id;
    t.global_view = VisualContext{ViewKind::global, std::move(global), {}};
    t.crop_view = VisualContext{ViewKind::crop, std::move(crop), {}};
    t.question = std::move(q);
    t.gt_answer = std::move(gt);
    t.template_id = "hand";
    return t;
}

bool params_bitwise_equal(const ParamSet& a, const ParamSet& b) {
    for (size_t i = 0; i < a.size(); ++i) {
        const auto& ea = a.entries()[i];
        const auto& eb = b.entries()[i];
        if (std::memcmp(ea.value.data(), eb.value.data(), ea.value.size() * sizeof(double)) != 0) return false;
    }
    return a.size() == b.size();
}

std::vector<int> greedy_answer(const ParamSet& params, const ModelConfig& model, const Triplet& t,
                               ViewKind kind) {
    Rng rng(0);
    Rollout r = sample_rollout(params, model, triplet_view(t, kind), t.question, kEvalGenLen, 0.0, rng);
    return extract_answer(r.tokens);
}

// Triplets whose ground truth is, by construction, exactly what the model
// answers on the global view; the pool is large enough that at least four
// candidates extract a nonempty answer.
std::vector<Triplet> self_consistent_triplets(const ParamSet& params, const ModelConfig& model, int want) {
    std::vector<Triplet> pool;
    Rng pool_rng(2024);
    for (int i = 0; i < 96; ++i) {
        std::vector<int> view(3 + static_cast<int>(pool_rng.uniform_int(4)));
        for (int& v : view) v = 3 + static_cast<int>(pool_rng.uniform_int(5));
        std::vector<int> q = {1 + static_cast<int>(pool_rng.uniform_int(2)),
                              3 + static_cast<int>(pool_rng.uniform_int(4))};
        pool.push_back(make_triplet(i, view, {view[0], view[1]}, q, {}));
    }
    std::vector<Triplet> out;
    for (Triplet& t : pool) {
        std::vector<int> ans = greedy_answer(params, model, t, ViewKind::global);
        if (ans.empty()) continue;
        t.gt_answer = std::move(ans);
        out.push_back(t);
        if (static_cast<int>(out.size()) == want) break;
    }
    return out;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<std::string> read_lines(const std::filesystem::path& p) {
    std::ifstream in(p);
    REQUIRE(in.good());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::filesystem::path temp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "opdlab_evalgap_test";
    std::filesystem::create_directories(dir);
    return dir;
}

const std::vector<int> kImpossible = {5, 6, 7, 5, 6, 7};

}  // namespace

TEST_CASE("accuracy is the exact-match fraction") {
    ModelConfig model = micro_cfg();
    ParamSet params = init_policy_params(model, 3);
    std::vector<Triplet> self = self_consistent_triplets(params, model, 4);
    REQUIRE(self.size() == 4);

    CHECK(accuracy(params, model, self, ViewKind::global) == 1.0);

    std::vector<Triplet> adversarial = self;
    for (Triplet& t : adversarial) t.gt_answer = kImpossible;
    CHECK(accuracy(params, model, adversarial, ViewKind::global) == 0.0);

    std::vector<Triplet> three_of_four = self;
    three_of_four[2].gt_answer = kImpossible;
    CHECK(accuracy(params, model, three_of_four, ViewKind::global) == 0.75);

    CHECK_THROWS_AS(accuracy(params, model, std::vector<Triplet>{}, ViewKind::global),
                    std::invalid_argument);
    Triplet no_gt = self[0];
    no_gt.gt_answer.clear();
    CHECK_THROWS_AS(accuracy(params, model, std::vector<Triplet>{no_gt}, ViewKind::global),
                    std::invalid_argument);
}

TEST_CASE("gap_report computes both views on the same split and the exact identity") {
    ModelConfig model = micro_cfg();
    ParamSet params = init_policy_params(model, 3);
    std::vector<Triplet> split = self_consistent_triplets(params, model, 4);
    REQUIRE(split.size() == 4);
    // Make the views differ so the two accuracies need not coincide.
    GapReport g = gap_report(params, model, split, 7);
    CHECK(g.step == 7);
    CHECK(g.n == 4);
    CHECK(g.gap == g.regional_acc - g.global_acc);
    CHECK(g.global_acc == 1.0);  // ground truth was built from the global answers

    SUBCASE("identical views give exactly zero gap") {
        std::vector<Triplet> same = split;
        for (Triplet& t : same) t.crop_view.tokens = t.global_view.tokens;
        GapReport z = gap_report(params, model, same, 0);
        CHECK(z.regional_acc == z.global_acc);
        CHECK(z.gap == 0.0);
    }

    SUBCASE("empty split is rejected") {
        CHECK_THROWS_AS(gap_report(params, model, std::vector<Triplet>{}, 0), std::invalid_argument);
    }
}

TEST_CASE("evaluation never mutates parameters") {
    ModelConfig model = micro_cfg();
    ParamSet params = init_policy_params(model, 5);
    ParamSet before = params;
    std::vector<Triplet> split = self_consistent_triplets(params, model, 3);
    REQUIRE(!split.empty());
    gap_report(params, model, split, 0);
    accuracy(params, model, split, ViewKind::crop);
    CHECK(params_bitwise_equal(params, before));
}

TEST_CASE("accuracy is invariant to triplet order and to positive logit rescaling") {
    ModelConfig model = micro_cfg();
    ParamSet params = init_policy_params(model, 9);
    std::vector<Triplet> split = self_consistent_triplets(params, model, 4);
    REQUIRE(split.size() == 4);
    split[1].gt_answer = kImpossible;  // mix hits and misses

    double base_g = accuracy(params, model, split, ViewKind::global);
    double base_c = accuracy(params, model, split, ViewKind::crop);

    std::vector<Triplet> shuffled = {split[3], split[0], split[2], split[1]};
    CHECK(accuracy(params, model, shuffled, ViewKind::global) == base_g);
    CHECK(accuracy(params, model, shuffled, ViewKind::crop) == base_c);

    ParamSet scaled = params;
    for (double& v : scaled.at("out_proj").value) v *= 3.7;
    CHECK(accuracy(scaled, model, split, ViewKind::global) == base_g);
    CHECK(accuracy(scaled, model, split, ViewKind::crop) == base_c);
}

TEST_CASE("forgetting_report measures the holdout delta and rejects mismatched checkpoints") {
    ModelConfig model = micro_cfg();
    ParamSet before = init_policy_params(model, 3);
    std::vector<Triplet> holdout = self_consistent_triplets(before, model, 4);
    REQUIRE(holdout.size() == 4);

    ParamSet damaged = before;
    for (double& v : damaged.at("out_proj").value) v = 0.0;  // argmax collapses to PAD
    ForgettingReport r = forgetting_report(before, damaged, model, holdout);
    CHECK(r.acc_before == 1.0);
    CHECK(r.acc_after == 0.0);
    CHECK(r.delta == -1.0);
    CHECK(r.delta == r.acc_after - r.acc_before);

    ModelConfig other = model;
    other.d_model = 16;
    other.d_ff = 32;
    ParamSet mismatched = init_policy_params(other, 3);
    CHECK_THROWS_WITH_AS(forgetting_report(before, mismatched, model, holdout),
                         doctest::Contains("architecture mismatch"), std::invalid_argument);
}

TEST_CASE("eval split validation enforces id and template disjointness") {
    std::vector<Triplet> training = {make_triplet(0, {5}, {5}, {1}, {5}),
                                     make_triplet(1, {6}, {6}, {1}, {6})};
    EvalSplit split;
    split.triplets = {make_triplet(10, {5}, {5}, {1}, {5})};
    split.holdout_triplets = {make_triplet(20, {6}, {6}, {1}, {6})};
    split.holdout_triplets[0].template_id = "other_family";
    CHECK_NOTHROW(check_eval_split(split, training));

    EvalSplit id_clash = split;
    id_clash.triplets[0].id = 1;
    CHECK_THROWS_WITH_AS(check_eval_split(id_clash, training), doctest::Contains("shares id"),
                         std::invalid_argument);

    EvalSplit family_clash = split;
    family_clash.holdout_triplets[0].template_id = "hand";
    CHECK_THROWS_WITH_AS(check_eval_split(family_clash, training), doctest::Contains("overlaps"),
                         std::invalid_argument);
}

TEST_CASE("metrics CSV: schema, gap alignment, round-trip, byte determinism") {
    auto dir = temp_dir();

    SUBCASE("empty inputs produce a header-only file") {
        auto path = dir / "empty.csv";
        write_metrics_csv(path.string(), {}, {});
        auto lines = read_lines(path);
        REQUIRE(lines.size() == 1);
        CHECK(lines[0] == kMetricsHeader);
    }

    SUBCASE("rows carry step metrics and gap columns only where a report exists") {
        StepRecord r1;
        r1.step = 1;
        r1.objective = "vision_opd";
        r1.loss = 0.125;
        r1.mean_divergence = 0.125;
        r1.mean_len = 7.5;
        r1.teacher_dist = 0.001953125;
        StepRecord r2 = r1;
        r2.step = 2;
        r2.loss = 0.0625;
        r2.mean_divergence = 0.0625;
        GapReport g0;
        g0.step = 0;
        g0.regional_acc = 0.875;
        g0.global_acc = 0.5;
        g0.gap = 0.375;
        g0.n = 8;
        GapReport g2 = g0;
        g2.step = 2;
        g2.global_acc = 0.625;
        g2.gap = 0.25;
        std::vector<StepRecord> records = {r1, r2};
        std::vector<GapReport> gaps = {g0, g2};

        auto path = dir / "metrics.csv";
        write_metrics_csv(path.string(), records, gaps);
        auto lines = read_lines(path);
        REQUIRE(lines.size() == 4);
        CHECK(lines[0] == kMetricsHeader);

        auto init_row = split_csv(lines[1]);
        REQUIRE(init_row.size() == 9);
        CHECK(init_row[0] == "0");
        CHECK(init_row[1] == "init");
        CHECK(init_row[2].empty());
        CHECK(std::stod(init_row[6]) == 0.875);
        CHECK(std::stod(init_row[8]) == 0.375);

        auto row1 = split_csv(lines[2]);
        REQUIRE(row1.size() == 9);
        CHECK(row1[0] == "1");
        CHECK(row1[1] == "vision_opd");
        CHECK(std::stod(row1[2]) == 0.125);
        CHECK(std::stod(row1[3]) == 0.125);
        CHECK(std::stod(row1[4]) == 7.5);
        CHECK(std::stod(row1[5]) == 0.001953125);
        CHECK(row1[6].empty());
        CHECK(row1[7].empty());
        CHECK(row1[8].empty());

        auto row2 = split_csv(lines[3]);
        REQUIRE(row2.size() == 9);
        CHECK(std::stod(row2[2]) == 0.0625);
        CHECK(std::stod(row2[6]) == 0.875);
        CHECK(std::stod(row2[7]) == 0.625);
        CHECK(std::stod(row2[8]) == 0.25);

        // Irrational metric values round-trip exactly through the format.
        StepRecord r3 = r1;
        r3.step = 3;
        r3.loss = 1.0 / 3.0;
        r3.mean_len = std::sqrt(2.0);
        auto path3 = dir / "roundtrip.csv";
        write_metrics_csv(path3.string(), std::vector<StepRecord>{r3}, {});
        auto row3 = split_csv(read_lines(path3)[1]);
        CHECK(std::stod(row3[2]) == 1.0 / 3.0);
        CHECK(std::stod(row3[4]) == std::sqrt(2.0));

        auto path_again = dir / "metrics_again.csv";
        write_metrics_csv(path_again.string(), records, gaps);
        CHECK(read_bytes(path) == read_bytes(path_again));
    }
}

TEST_CASE("run summary JSON carries the final gap, holdout delta, and gap series") {
    auto dir = temp_dir();
    RunSummary s;
    s.run_id = "run_0123abcd";
    s.config_hash = "deadbeef00000001";
    s.dataset_hash = "cafe000000000002";
    s.final_gap.regional_acc = 0.9;
    s.final_gap.global_acc = 0.8;
    s.final_gap.gap = 0.1;
    ForgettingReport f;
    f.acc_before = 0.75;
    f.acc_after = 0.5;
    f.delta = -0.25;
    s.holdout = f;
    GapReport g0;
    g0.step = 0;
    g0.gap = 0.25;
    GapReport g1;
    g1.step = 25;
    g1.gap = 0.125;
    s.gap_series = {g0, g1};

    auto path = dir / "summary.json";
    write_summary_json(path.string(), s);
    std::ifstream in(path);
    auto j = nlohmann::json::parse(in);
    CHECK(j["run_id"] == "run_0123abcd");
    CHECK(j["config_hash"] == "deadbeef00000001");
    CHECK(j["dataset_hash"] == "cafe000000000002");
    CHECK(j["final"]["regional_acc"] == 0.9);
    CHECK(j["final"]["gap"] == 0.1);
    CHECK(j["holdout"]["before"] == 0.75);
    CHECK(j["holdout"]["delta"] == -0.25);
    REQUIRE(j["gap_series"].size() == 2);
    CHECK(j["gap_series"][1][0] == 25);
    CHECK(j["gap_series"][1][1] == 0.125);

    SUBCASE("holdout is null when absent") {
        RunSummary bare = s;
        bare.holdout.reset();
        auto p2 = dir / "summary_bare.json";
        write_summary_json(p2.string(), bare);
        std::ifstream in2(p2);
        auto j2 = nlohmann::json::parse(in2);
        CHECK(j2["holdout"].is_null());
    }

    SUBCASE("emit_reports writes both artifacts") {
        auto csv = dir / "emit.csv";
        auto json = dir / "emit.json";
        emit_reports(csv.string(), json.string(), {}, {}, s);
        CHECK(std::filesystem::exists(csv));
        CHECK(std::filesystem::exists(json));
    }
}
