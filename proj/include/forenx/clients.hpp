#pragma once

#include <chrono>
#include <filesystem>
#include <mutex>
#include <stdexcept>
#include <string>

#include "forenx/config.hpp"
#include "forenx/dataset.hpp"

namespace forenx {

/// Minimal chat-completions client (OpenAI wire format) over HTTP or HTTPS.
class ChatClient {
public:
    /// The API key comes from the environment variable named by `key_env` (may be unset for
    /// local endpoints).
    explicit ChatClient(LiveClientSettings settings, std::string key_env = "OPENAI_API_KEY");

    /// POSTs {"model", "messages", "temperature": 0} and returns the first choice's content.
    std::string complete(const Json& messages) const;

    const LiveClientSettings& settings() const { return settings_; }

private:
    LiveClientSettings settings_;
    std::string api_key_;
};

/// Appends one JSON object per line; shared by the live backends for auditing.
class RequestLog {
public:
    RequestLog() = default;
    explicit RequestLog(std::filesystem::path file) : file_(std::move(file)) {}
    void append(const Json& entry);
    bool enabled() const { return !file_.empty(); }

private:
    std::filesystem::path file_;
    std::mutex mu_;
};

class LiveCaptioner : public Captioner {
public:
    explicit LiveCaptioner(const ChatClient& client) : client_(client) {}
    std::string caption(const Image& image) override;

private:
    const ChatClient& client_;
};

class LiveSummarizer : public Summarizer {
public:
    explicit LiveSummarizer(const ChatClient& client) : client_(client) {}
    /// Rejects more than settings().max_pairs pairs rather than truncating evidence.
    std::string summarize(const std::string& image_id, std::span<const EvidencePair> pairs) override;

private:
    const ChatClient& client_;
};

}  // namespace forenx
