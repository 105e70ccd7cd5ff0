#include <catch_amalgamated.hpp>

#include <filesystem>
#include <thread>

#include "capsule/scorer.hpp"
#include "capsule/scorer_http.hpp"
#include "support/schema_fuzz.hpp"

using namespace capsule;
using namespace capsule::scorer;
namespace fs = std::filesystem;

namespace {

panel::FirmSnapshot firm(std::string id, std::string name = "ACME") {
    panel::FirmSnapshot s;
    s.firm_id = std::move(id);
    s.name = std::move(name);
    s.ticker = "ACM";
    s.country = "US";
    s.sector = "Industrials";
    return s;
}

const panel::Cutoff kCutoff{"model-x", Date(2024, 6, 1), Date(2024, 9, 1), panel::Architecture::Standard};

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return ErrorCode::InvalidArgument;
}

std::string valid_json(std::array<int, 5> rev = {20, 20, 20, 20, 20}, int outlook = 3) {
    fuzz::oj d = fuzz::oj::parse(R"({
      "knowledge_cutoff_date": "2024-06-01",
      "firm": {"name": "ACME", "ticker": "ACM", "country": "US", "industry_code": "Industrials"},
      "horizon_months": 12,
      "scores": {"outlook": 0, "growth": 2, "profitability": 1, "risk": -3, "confidence": 60},
      "distributions": {
        "revenue_growth_bins_pct": {"less_than_minus_10": 0, "minus_10_to_0": 0, "plus_0_to_5": 0,
                                    "plus_5_to_10": 0, "greater_than_plus_10": 0},
        "eps_growth_bins_pct": {"less_than_minus_20": 5, "minus_20_to_0": 15, "plus_0_to_10": 40,
                                "plus_10_to_25": 30, "greater_than_plus_25": 10},
        "margin_change_bins_pct": {"less_than_minus_2pp": 10, "minus_2pp_to_0pp": 20, "plus_0pp_to_1pp": 40,
                                   "plus_1pp_to_2pp": 20, "greater_than_plus_2pp": 10}
      },
      "drivers": ["pricing_power", "input_costs"],
      "rationale_short": "Strong pricing offsets input cost pressure.",
      "knowledge_coverage": 70
    })");
    d["scores"]["outlook"] = outlook;
    auto& r = d["distributions"]["revenue_growth_bins_pct"];
    for (std::size_t i = 0; i < 5; ++i) r[fuzz::kBinNames[0][i]] = rev[i];
    return d.dump();
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("capsule_test_scorer_" + name);
    fs::remove_all(p);
    return p;
}

// Counts calls and answers with a fixed text.
class FixedClient final : public ScorerClient {
public:
    explicit FixedClient(std::string text) : text_(std::move(text)) {}
    std::string send(const PromptPair&, const DecodeParams&) override {
        ++calls;
        return text_;
    }
    int calls = 0;

private:
    std::string text_;
};

// Fails with a transport error a fixed number of times, then answers.
class FlakyClient final : public ScorerClient {
public:
    explicit FlakyClient(int failures) : failures_(failures) {}
    std::string send(const PromptPair& p, const DecodeParams& d) override {
        ++calls;
        if (calls <= failures_) fail(ErrorCode::TransportError, "flaky");
        return inner_.send(p, d);
    }
    int calls = 0;

private:
    int failures_;
    MockScorer inner_;
};

}  // namespace

TEST_CASE("render_prompt substitutes every identifier") {
    auto p = render_prompt(firm("US0000000001"), kCutoff);
    CHECK(p.user_text.find("business outlook** for ACME") != std::string::npos);
    CHECK(p.user_text.find("pre-2024-06-01") != std::string::npos);
    CHECK(p.user_text.find("(Ticker: ACM, ISIN: US0000000001)") != std::string::npos);
    CHECK(p.user_text.find("\"industry_code\": \"Industrials\"") != std::string::npos);
    CHECK(p.system_text.rfind("You are an unbiased CFA-level equity analyst. Assume \n\"today\" is 2024-06-01.", 0) == 0);
    for (auto ph : kPlaceholders) {
        CHECK(p.system_text.find(ph) == std::string::npos);
        CHECK(p.user_text.find(ph) == std::string::npos);
    }
}

TEST_CASE("render_prompt matches a plain find-and-replace oracle") {
    auto f = firm("GB00B03MLX29", "Royal Widget plc");
    auto oracle = [&](std::string s) {
        const std::pair<std::string, std::string> subs[] = {
            {"{CUT_OFF_DATE}", "2024-06-01"}, {"{COMPANY_NAME}", f.name}, {"{TICKER}", f.ticker},
            {"{ISIN}", f.firm_id},           {"{COUNTRY}", f.country},  {"{INDUSTRY_CODE}", f.sector}};
        for (const auto& [k, v] : subs)
            for (auto pos = s.find(k); pos != std::string::npos; pos = s.find(k, pos + v.size()))
                s.replace(pos, k.size(), v);
        return s;
    };
    auto p = render_prompt(f, kCutoff);
    CHECK(p.system_text == oracle(std::string(kSystemTemplate)));
    CHECK(p.user_text == oracle(std::string(kUserTemplate)));
}

TEST_CASE("render_prompt errors and determinism") {
    auto f = firm("X1");
    f.ticker.clear();
    CHECK(code_of([&] { render_prompt(f, kCutoff); }) == ErrorCode::TemplateError);
    CHECK(render_prompt(firm("X1"), kCutoff) == render_prompt(firm("X1"), kCutoff));
    CHECK(render_prompt(firm("X1"), kCutoff).hash() == render_prompt(firm("X1"), kCutoff).hash());
    CHECK(render_prompt(firm("X1"), kCutoff).hash() != render_prompt(firm("X2"), kCutoff).hash());
    auto sneaky = firm("X1", "{TICKER}");
    CHECK(code_of([&] { render_prompt(sneaky, kCutoff); }) == ErrorCode::TemplateError);
}

TEST_CASE("parse_validate examples") {
    auto a = parse_validate(valid_json());
    CHECK(a.revenue_growth_bins == Bins{20, 20, 20, 20, 20});
    CHECK(a.outlook == 3);
    CHECK(a.drivers == std::vector<std::string>{"pricing_power", "input_costs"});

    CHECK(code_of([] { parse_validate(valid_json({20, 20, 20, 20, 19})); }) == ErrorCode::BinSumViolation);
    CHECK(code_of([] { parse_validate(valid_json({20, 20, 20, 20, 20}, 11)); }) == ErrorCode::RangeViolation);
    CHECK(code_of([] { parse_validate("not json"); }) == ErrorCode::NotJson);
    CHECK(code_of([] { parse_validate("[1,2]"); }) == ErrorCode::NotJson);

    auto d = fuzz::oj::parse(valid_json());
    d["drivers"] = {"pricing_power", "astrology"};
    CHECK(code_of([&] { parse_validate(d.dump()); }) == ErrorCode::UnknownDriverTag);
    d = fuzz::oj::parse(valid_json());
    d["scores"]["risk"] = "2";
    CHECK(code_of([&] { parse_validate(d.dump()); }) == ErrorCode::SchemaViolation);
}

TEST_CASE("rationale token limit is a whitespace count") {
    CHECK(whitespace_tokens("") == 0);
    CHECK(whitespace_tokens("  a\tb\n c  ") == 3);
    auto d = fuzz::oj::parse(valid_json());
    d["rationale_short"] = fuzz::words(30);
    CHECK_NOTHROW(parse_validate(d.dump()));
    d["rationale_short"] = fuzz::words(31);
    CHECK(code_of([&] { parse_validate(d.dump()); }) == ErrorCode::SchemaViolation);
}

TEST_CASE("serialize then parse is identity") {
    Rng rng(5);
    for (int i = 0; i < 300; ++i) {
        auto a = parse_validate(fuzz::valid_document(rng).dump());
        REQUIRE(parse_validate(serialize(a)) == a);
    }
}

TEST_CASE("every single-bin change of one unit is rejected") {
    Rng rng(9);
    for (int doc = 0; doc < 20; ++doc) {
        auto d = fuzz::valid_document(rng);
        REQUIRE_NOTHROW(parse_validate(d.dump()));
        for (std::size_t v = 0; v < 3; ++v)
            for (std::size_t b = 0; b < 5; ++b)
                for (int delta : {-1, 1}) {
                    auto m = d;
                    auto& cell = m["distributions"][fuzz::kDistNames[v]][fuzz::kBinNames[v][b]];
                    cell = cell.get<int>() + delta;
                    REQUIRE_THROWS_AS(parse_validate(m.dump()), Error);
                }
    }
}

TEST_CASE("mutation corpus verdicts") {
    for (const auto& c : fuzz::corpus(400, 77)) {
        bool accepted = true;
        try {
            parse_validate(c.text);
        } catch (const Error&) {
            accepted = false;
        }
        INFO(c.label << ": " << c.text);
        REQUIRE(accepted == c.valid);
    }
}

TEST_CASE("mock scorer answers validate") {
    MockScorer m({{"F1", 7}});
    auto raw = m.send(render_prompt(firm("F1"), kCutoff), {});
    auto a = parse_validate(raw);
    CHECK(a.outlook == 7);
    CHECK(a.knowledge_cutoff_date == "2024-06-01");
    CHECK(a.name == "ACME");
    CHECK(m.send(render_prompt(firm("F1"), kCutoff), {}) == raw);
}

TEST_CASE("score_universe counts") {
    std::vector<panel::FirmSnapshot> firms;
    for (int i = 0; i < 100; ++i) firms.push_back(firm("F" + std::to_string(i)));

    SECTION("ten clean firms") {
        MockScorer m;
        std::vector<panel::FirmSnapshot> ten(firms.begin(), firms.begin() + 10);
        auto b = score_universe(ten, kCutoff, &m, nullptr);
        CHECK(b.report.ok == 10);
        CHECK(b.report.missingness() == 0.0);
    }
    SECTION("one failure in a hundred") {
        MockScorer m;
        m.inject("F42", MockScorer::Fault::Malformed);
        auto b = score_universe(firms, kCutoff, &m, nullptr);
        CHECK(b.report.malformed == 1);
        CHECK(b.report.missingness() == Catch::Approx(1.0 / 100.0).epsilon(1e-15));
        CHECK(b.firms[42].status == ScoreStatus::Malformed);
    }
    SECTION("status counts partition the universe") {
        MockScorer m;
        m.inject("F1", MockScorer::Fault::Malformed);
        m.inject("F2", MockScorer::Fault::Refusal);
        m.inject("F3", MockScorer::Fault::Transport);
        m.inject("F4", MockScorer::Fault::Refusal);
        ScoreOptions opt;
        opt.initial_backoff = std::chrono::milliseconds(0);
        opt.parallelism = 4;
        auto b = score_universe(firms, kCutoff, &m, nullptr, opt);
        const auto& r = b.report;
        CHECK(r.ok + r.malformed + r.refusal + r.transport_error == r.total);
        CHECK(r.malformed == 1);
        CHECK(r.refusal == 2);
        CHECK(r.transport_error == 1);
        CHECK(b.firms[3].attempts == 3);
        CHECK(r.missingness() == Catch::Approx(0.04).epsilon(1e-15));
        CHECK(m.calls() == 100 + 2);  // transport failure retried twice
    }
}

TEST_CASE("validation failures are never retried; transport failures are") {
    std::vector<panel::FirmSnapshot> one{firm("F1")};
    ScoreOptions opt;
    opt.initial_backoff = std::chrono::milliseconds(0);
    FixedClient bad("{\"oops\": 1}");
    auto b = score_universe(one, kCutoff, &bad, nullptr, opt);
    CHECK(bad.calls == 1);
    CHECK(b.firms[0].status == ScoreStatus::Malformed);

    FlakyClient flaky(2);
    auto f = score_universe(one, kCutoff, &flaky, nullptr, opt);
    CHECK(flaky.calls == 3);
    CHECK(f.firms[0].status == ScoreStatus::Ok);
    CHECK(f.firms[0].attempts == 3);
}

TEST_CASE("warm cache makes zero client calls and gives the same answers") {
    auto dir = scratch("cache");
    std::vector<panel::FirmSnapshot> firms;
    for (int i = 0; i < 20; ++i) firms.push_back(firm("F/" + std::to_string(i)));
    ScoreCache cache(dir);
    MockScorer cold;
    cold.inject("F/3", MockScorer::Fault::Malformed);
    auto first = score_universe(firms, kCutoff, &cold, &cache);
    CHECK(cold.calls() == 20);
    CHECK(fs::exists(dir / "model-x" / "F_0.json"));

    MockScorer warm;
    auto second = score_universe(firms, kCutoff, &warm, &cache);
    CHECK(warm.calls() == 0);
    for (std::size_t i = 0; i < firms.size(); ++i) {
        CHECK(second.firms[i].cache_hit);
        CHECK(second.firms[i].status == first.firms[i].status);
        CHECK(second.firms[i].assessment == first.firms[i].assessment);
    }

    ScoreOptions only;
    only.mode = ScorerMode::CacheOnly;
    auto third = score_universe(firms, kCutoff, nullptr, &cache, only);
    CHECK(third.report.ok == first.report.ok);

    auto other = kCutoff;
    other.knowledge_cutoff = Date(2024, 3, 1);
    auto miss = score_universe(firms, other, nullptr, &cache, only);
    CHECK(miss.report.transport_error == firms.size());
}

TEST_CASE("leakage probe examples") {
    std::vector<Probe> probes;
    for (int i = 0; i < 100; ++i)
        probes.push_back({"Who won event " + std::to_string(i) + "?", "Team " + std::to_string(i),
                          Date(2024, 7, 1).plus_days(i)});
    CutoffRespectingMock frozen(Date(2024, 6, 1), probes);
    AllKnowingMock oracle(probes);
    FixedClient silent("");
    CHECK(leakage_probe(frozen, probes) == 0.0);
    CHECK(leakage_probe(oracle, probes) == 1.0);
    CHECK(leakage_probe(silent, probes) == 0.0);
    CutoffRespectingMock later(Date(2024, 7, 25), probes);
    CHECK(leakage_probe(later, probes) == Catch::Approx(0.25).epsilon(1e-15));  // days 0..24
    CHECK(code_of([&] { leakage_probe(oracle, {}); }) == ErrorCode::InvalidArgument);
    CHECK(normalize_answer("  Team 7. ") == "team 7");
}

TEST_CASE("probe file round trip") {
    auto dir = scratch("probes");
    fs::create_directories(dir);
    std::vector<Probe> probes{{"Q, with comma?", "A \"quoted\"", Date(2024, 1, 2)}};
    write_probes(probes, dir / "probes.csv");
    auto back = load_probes(dir / "probes.csv");
    REQUIRE(back.size() == 1);
    CHECK(back[0].question == probes[0].question);
    CHECK(back[0].answer == probes[0].answer);
    CHECK(back[0].event_date == probes[0].event_date);
}

TEST_CASE("chat envelope helpers") {
    auto body = nlohmann::json::parse(chat_request_body("m1", {"sys", "usr"}, {}));
    CHECK(body["model"] == "m1");
    CHECK(body["messages"][0]["role"] == "system");
    CHECK(body["messages"][1]["content"] == "usr");
    CHECK(body["temperature"] == 0.0);
    CHECK(body["top_p"] == 1.0);
    CHECK(chat_response_text(R"({"choices":[{"message":{"content":"hi"}}]})") == "hi");
    CHECK(chat_response_text(R"({"choices":[{"message":{"content":null}}]})").empty());
    CHECK(chat_response_text(R"({"error":"x"})") == R"({"error":"x"})");
    auto u = split_url("https://api.example.com:8443/v1/chat/completions");
    CHECK(u.origin == "https://api.example.com:8443");
    CHECK(u.path == "/v1/chat/completions");
    CHECK(code_of([] { split_url("ftp://x/y"); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("live client against a local server") {
    httplib::Server server;
    std::string seen_auth, seen_model;
    server.Post("/v1/chat", [&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        auto j = nlohmann::json::parse(req.body);
        seen_model = j["model"];
        nlohmann::json reply = {{"choices", {{{"message", {{"content", valid_json()}}}}}}};
        res.set_content(reply.dump(), "application/json");
    });
    server.Post("/down", [](const httplib::Request&, httplib::Response& res) { res.status = 503; });
    int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    HttpSettings s;
    s.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat";
    s.api_key = "secret";
    s.model = "frozen-1";
    HttpScorer live(s);
    auto batch = score_universe({firm("F1")}, kCutoff, &live, nullptr);
    CHECK(batch.report.ok == 1);
    CHECK(seen_auth == "Bearer secret");
    CHECK(seen_model == "frozen-1");

    s.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/down";
    HttpScorer down(s);
    CHECK(code_of([&] { down.send({"a", "b"}, {}); }) == ErrorCode::TransportError);

    server.stop();
    t.join();
}
