#include "forenx/clients.hpp"

#include <cstdlib>
#include <fstream>

#include <httplib.h>

#include "forenx/hash.hpp"

namespace forenx {

ChatClient::ChatClient(LiveClientSettings settings, std::string key_env) : settings_(std::move(settings)) {
    if (const char* k = std::getenv(key_env.c_str())) api_key_ = k;
}

std::string ChatClient::complete(const Json& messages) const {
    httplib::Client cli(settings_.endpoint);
    if (!cli.is_valid()) throw ValidationError("live endpoint '" + settings_.endpoint + "' is not a valid URL");
    cli.set_connection_timeout(std::chrono::seconds(settings_.timeout_seconds));
    cli.set_read_timeout(std::chrono::seconds(settings_.timeout_seconds));
    httplib::Headers headers;
    if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
    const Json body = {{"model", settings_.model}, {"messages", messages}, {"temperature", 0}};
    auto res = cli.Post("/v1/chat/completions", headers, body.dump(), "application/json");
    if (!res) throw TransportError("request to " + settings_.endpoint + " failed: " + httplib::to_string(res.error()));
    if (res->status != 200) {
        throw TransportError("endpoint " + settings_.endpoint + " answered HTTP " + std::to_string(res->status));
    }
    try {
        const Json reply = Json::parse(res->body);
        return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw TransportError(std::string("malformed chat completion: ") + e.what());
    }
}

void RequestLog::append(const Json& entry) {
    if (!enabled()) return;
    std::lock_guard lock(mu_);
    std::ofstream out(file_, std::ios::app);
    out << entry.dump() << "\n";
}

std::string LiveCaptioner::caption(const Image& image) {
    const std::string png = encode_png(image);
    const std::string url =
        "data:image/png;base64," +
        base64_encode(std::span(reinterpret_cast<const std::uint8_t*>(png.data()), png.size()));
    Json content = Json::array();
    content.push_back({{"type", "text"}, {"text", "Describe this image in one short sentence."}});
    content.push_back({{"type", "image_url"}, {"image_url", {{"url", url}}}});
    return client_.complete(Json::array({{{"role", "user"}, {"content", content}}}));
}

std::string LiveSummarizer::summarize(const std::string& image_id, std::span<const EvidencePair> pairs) {
    if (pairs.empty()) throw ValidationError("summarize: no evidence for image '" + image_id + "'");
    if (pairs.size() > client_.settings().max_pairs) {
        throw ValidationError("summarize: " + std::to_string(pairs.size()) + " evidence pairs exceed max_pairs " +
                              std::to_string(client_.settings().max_pairs));
    }
    std::string evidence;
    for (const auto& p : pairs) evidence += "- " + p.location + ": " + p.reason + "\n";
    const std::string prompt =
        "The following regions of an AI-generated image were marked by an annotator, each with the "
        "reason it looks synthetic:\n" +
        evidence +
        "Write a short paragraph explaining why the image is AI-generated. Mention every region "
        "and keep each reason.";
    return client_.complete(Json::array({{{"role", "user"}, {"content", prompt}}}));
}

}  // namespace forenx
