#include "forenx/service.hpp"

#include <fstream>
#include <sstream>

#include <httplib.h>

#include "forenx/checkpoint.hpp"

namespace forenx {

const char* to_string(AnnotationState s) {
    switch (s) {
        case AnnotationState::Pending: return "pending";
        case AnnotationState::Annotated: return "annotated";
        case AnnotationState::Summarized: return "summarized";
    }
    return "?";
}

namespace {

AnnotationState parse_state(const std::string& s) {
    if (s == "pending") return AnnotationState::Pending;
    if (s == "annotated") return AnnotationState::Annotated;
    if (s == "summarized") return AnnotationState::Summarized;
    throw ValidationError("unknown annotation state '" + s + "'");
}

std::size_t box_count(const AnnotationStore::View& v) {
    std::size_t n = 0;
    for (const auto& a : v.annotations) n += a.boxes.size();
    return n;
}

}  // namespace

Json to_json(const AnnotationStore::View& v) {
    Json anns = Json::array();
    for (const auto& a : v.annotations) anns.push_back(to_json(a));
    Json j;
    j["image_id"] = v.image_id;
    j["state"] = to_string(v.state);
    j["annotations"] = anns;
    j["summary"] = v.summary ? Json(*v.summary) : Json(nullptr);
    return j;
}

AnnotationStore::AnnotationStore(std::vector<ImageEntry> images, std::filesystem::path dir, Summarizer& summarizer)
    : images_(std::move(images)), dir_(std::move(dir)), summarizer_(summarizer) {
    std::filesystem::create_directories(dir_);
    for (const auto& e : images_) {
        const std::string& id = e.sample.id;
        if (id.empty() || id.find_first_of("/\\") != std::string::npos || id == "." || id == "..") {
            throw ValidationError("image id '" + id + "' cannot name an annotation file");
        }
        auto s = std::make_unique<Slot>();
        s->view.image_id = id;
        load(*s);
        if (!slots_.emplace(id, std::move(s)).second) throw ValidationError("duplicate image id '" + id + "'");
    }
}

const ImageEntry& AnnotationStore::image(const std::string& id) const {
    for (const auto& e : images_) {
        if (e.sample.id == id) return e;
    }
    throw ServiceError(404, "unknown image '" + id + "'");
}

AnnotationStore::Slot& AnnotationStore::slot(const std::string& id) const {
    auto it = slots_.find(id);
    if (it == slots_.end()) throw ServiceError(404, "unknown image '" + id + "'");
    return *it->second;
}

void AnnotationStore::load(Slot& s) const {
    const auto file = dir_ / (s.view.image_id + ".json");
    if (!std::filesystem::exists(file)) return;
    std::ifstream in(file);
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        const Json j = Json::parse(ss.str());
        s.view.state = parse_state(j.at("state").get<std::string>());
        for (const auto& a : j.at("annotations")) s.view.annotations.push_back(annotation_from_json(a));
        if (!j.at("summary").is_null()) s.view.summary = j.at("summary").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("corrupt annotation file " + file.string() + ": " + e.what());
    }
}

void AnnotationStore::persist(const View& v) const {
    write_file_atomic(dir_ / (v.image_id + ".json"), to_json(v).dump(2) + "\n");
}

AnnotationStore::View AnnotationStore::get(const std::string& id) const {
    Slot& s = slot(id);
    std::lock_guard lock(s.mu);
    return s.view;
}

AnnotationStore::View AnnotationStore::post_annotation(const Json& body) {
    BoxAnnotation a;
    try {
        a = annotation_from_json(body);
    } catch (const SchemaError& e) {
        throw ServiceError(400, e.what(), e.field());
    }
    Slot& s = slot(a.image_id);
    std::lock_guard lock(s.mu);
    if (s.view.state == AnnotationState::Summarized) {
        throw ServiceError(409, "image '" + a.image_id + "' is already summarized");
    }
    View next = s.view;
    auto same = std::find_if(next.annotations.begin(), next.annotations.end(),
                             [&](const BoxAnnotation& x) { return x.annotator == a.annotator; });
    if (same != next.annotations.end()) {
        *same = std::move(a);
    } else {
        next.annotations.push_back(std::move(a));
    }
    next.state = AnnotationState::Annotated;
    persist(next);
    s.view = std::move(next);
    return s.view;
}

AnnotationStore::View AnnotationStore::summarize(const std::string& id) {
    Slot& s = slot(id);
    std::lock_guard lock(s.mu);
    if (box_count(s.view) == 0) {
        throw ServiceError(409, "image '" + id + "' has no annotated boxes to summarize");
    }
    std::vector<EvidencePair> pairs;
    for (const auto& a : s.view.annotations) {
        auto e = evidence_from(a);
        pairs.insert(pairs.end(), e.begin(), e.end());
    }
    std::string summary;
    {
        std::lock_guard slock(summarizer_mu_);
        summary = summarize_annotations(id, pairs, summarizer_);
    }
    View next = s.view;
    next.summary = std::move(summary);
    next.state = AnnotationState::Summarized;
    persist(next);
    s.view = std::move(next);
    return s.view;
}

std::string AnnotationStore::export_jsonl() const {
    std::vector<BoxAnnotation> all;
    for (const auto& e : images_) {
        const View v = get(e.sample.id);
        all.insert(all.end(), v.annotations.begin(), v.annotations.end());
    }
    return annotations_to_jsonl(all);
}

std::vector<ImageEntry> annotation_queue(const std::filesystem::path& dataset_file) {
    const auto records = read_dataset(dataset_file);
    const auto dir = std::filesystem::absolute(dataset_file).parent_path();
    std::vector<ImageEntry> out;
    for (const auto& r : records) {
        if (r.sample.label != Label::Fake) continue;
        std::filesystem::path p = r.sample.image;
        if (p.is_relative()) p = dir / p;
        out.push_back({r.sample, p});
    }
    return out;
}

// ---- HTTP -----------------------------------------------------------------------------------

namespace {

void send_error(httplib::Response& res, int status, const std::string& message, const std::string& field = {}) {
    Json j = {{"error", message}};
    if (!field.empty()) j["field"] = field;
    res.status = status;
    res.set_content(j.dump(), "application/json");
}

template <typename F>
httplib::Server::Handler guarded(F&& f) {
    return [f = std::forward<F>(f)](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const ServiceError& e) {
            send_error(res, e.status(), e.what(), e.field());
        } catch (const SchemaError& e) {
            send_error(res, 400, e.what(), e.field());
        } catch (const ValidationError& e) {
            send_error(res, 400, e.what());
        } catch (const TransportError& e) {
            send_error(res, 502, e.what());
        } catch (const std::exception& e) {
            send_error(res, 500, e.what());
        }
    };
}

void send_json(httplib::Response& res, const Json& j) { res.set_content(j.dump(), "application/json"); }

}  // namespace

AnnotationService::AnnotationService(AnnotationStore& store, std::filesystem::path ui_dir)
    : store_(store), server_(std::make_unique<httplib::Server>()) {
    auto& srv = *server_;
    srv.Get("/images", guarded([this](const httplib::Request&, httplib::Response& res) {
        Json list = Json::array();
        for (const auto& e : store_.images()) {
            list.push_back({{"id", e.sample.id},
                            {"source", e.sample.source},
                            {"split", e.sample.split},
                            {"state", to_string(store_.get(e.sample.id).state)}});
        }
        send_json(res, list);
    }));
    srv.Get(R"(/images/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
        const ImageEntry& e = store_.image(req.matches[1]);
        res.set_content(encode_png(read_ppm(e.file)), "image/png");
    }));
    srv.Post("/annotations", guarded([this](const httplib::Request& req, httplib::Response& res) {
        Json body;
        try {
            body = Json::parse(req.body);
        } catch (const nlohmann::json::exception& e) {
            throw ServiceError(400, std::string("body is not valid JSON: ") + e.what(), "$");
        }
        send_json(res, to_json(store_.post_annotation(body)));
    }));
    srv.Get(R"(/annotations/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
        send_json(res, to_json(store_.get(req.matches[1])));
    }));
    srv.Post(R"(/summarize/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
        send_json(res, to_json(store_.summarize(req.matches[1])));
    }));
    srv.Get("/export", guarded([this](const httplib::Request&, httplib::Response& res) {
        res.set_content(store_.export_jsonl(), "application/x-ndjson");
    }));
    if (!ui_dir.empty() && !srv.set_mount_point("/", ui_dir.string())) {
        throw ValidationError("ui directory " + ui_dir.string() + " cannot be served");
    }
}

AnnotationService::~AnnotationService() { stop(); }

int AnnotationService::bind(const std::string& host, int port) {
    if (port == 0) {
        const int p = server_->bind_to_any_port(host);
        if (p < 0) throw std::runtime_error("cannot bind " + host);
        return p;
    }
    if (!server_->bind_to_port(host, port)) {
        throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
    }
    return port;
}

void AnnotationService::listen() { server_->listen_after_bind(); }

void AnnotationService::stop() {
    if (server_) server_->stop();
}

}  // namespace forenx
