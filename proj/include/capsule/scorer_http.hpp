#pragma once

// Chat-completions client for live scoring. Build with CPPHTTPLIB_OPENSSL_SUPPORT
// (and link OpenSSL) to reach https endpoints.

#include <httplib.h>

#include <chrono>
#include <cstdlib>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "capsule/core/error.hpp"
#include "capsule/scorer.hpp"

namespace capsule::scorer {

struct HttpSettings {
    std::string endpoint;  // full URL of the chat-completions route
    std::string api_key;
    std::string model;     // sent as "model"
    std::chrono::seconds connect_timeout{10};
    std::chrono::seconds read_timeout{120};

    /// SCORER_ENDPOINT, SCORER_API_KEY, SCORER_MODEL. A set SCORER_MODEL replaces `fallback_model`.
    static HttpSettings from_env(const std::string& fallback_model = {}) {
        auto env = [](const char* k) -> std::string {
            const char* v = std::getenv(k);
            return v ? v : "";
        };
        HttpSettings s;
        s.endpoint = env("SCORER_ENDPOINT");
        s.api_key = env("SCORER_API_KEY");
        s.model = env("SCORER_MODEL");
        if (s.model.empty()) s.model = fallback_model;
        if (s.endpoint.empty()) fail(ErrorCode::InvalidArgument, "SCORER_ENDPOINT is not set");
        if (s.model.empty()) fail(ErrorCode::InvalidArgument, "no model name for live scoring (set SCORER_MODEL)");
        return s;
    }
};

struct Url {
    std::string origin;  // scheme://host[:port]
    std::string path;
};

inline Url split_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) fail(ErrorCode::InvalidArgument, "endpoint needs a scheme: " + url);
    const std::string scheme = url.substr(0, scheme_end);
    if (scheme != "http" && scheme != "https") fail(ErrorCode::InvalidArgument, "unsupported scheme: " + scheme);
    auto slash = url.find('/', scheme_end + 3);
    Url u;
    u.origin = url.substr(0, slash);
    u.path = slash == std::string::npos ? "/" : url.substr(slash);
    if (u.origin.size() <= scheme_end + 3) fail(ErrorCode::InvalidArgument, "endpoint has no host: " + url);
    return u;
}

inline std::string chat_request_body(const std::string& model, const PromptPair& p, const DecodeParams& d) {
    nlohmann::ordered_json j;
    j["model"] = model;
    j["messages"] = nlohmann::ordered_json::array(
        {{{"role", "system"}, {"content", p.system_text}}, {{"role", "user"}, {"content", p.user_text}}});
    j["temperature"] = d.temperature;
    j["top_p"] = d.top_p;
    return j.dump();
}

/// Message text of the first choice. An envelope without one yields the body itself,
/// which then fails response validation as malformed.
inline std::string chat_response_text(const std::string& body) {
    auto j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) return body;
    try {
        const auto& c = j.at("choices").at(0).at("message").at("content");
        if (c.is_null()) return "";
        return c.get<std::string>();
    } catch (const nlohmann::json::exception&) {
        return body;
    }
}

class HttpScorer final : public ScorerClient {
public:
    explicit HttpScorer(HttpSettings s) : settings_(std::move(s)), url_(split_url(settings_.endpoint)) {}

    std::string send(const PromptPair& prompt, const DecodeParams& params) override {
        httplib::Client cli(url_.origin);
        cli.set_connection_timeout(settings_.connect_timeout);
        cli.set_read_timeout(settings_.read_timeout);
        httplib::Headers headers;
        if (!settings_.api_key.empty()) headers.emplace("Authorization", "Bearer " + settings_.api_key);
        auto res = cli.Post(url_.path, headers, chat_request_body(settings_.model, prompt, params), "application/json");
        if (!res) fail(ErrorCode::TransportError, settings_.endpoint + ": " + httplib::to_string(res.error()));
        if (res->status < 200 || res->status >= 300)
            fail(ErrorCode::TransportError, settings_.endpoint + ": HTTP " + std::to_string(res->status));
        return chat_response_text(res->body);
    }

    const HttpSettings& settings() const { return settings_; }

private:
    HttpSettings settings_;
    Url url_;
};

}  // namespace capsule::scorer
