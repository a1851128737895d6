#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "forenx/config.hpp"
#include "forenx/dataset.hpp"

namespace httplib {
class Server;
}

namespace forenx {

enum class AnnotationState { Pending, Annotated, Summarized };
const char* to_string(AnnotationState s);

/// Error with an HTTP status; `field` is set for schema violations.
class ServiceError : public std::runtime_error {
public:
    ServiceError(int status, const std::string& message, std::string field = {})
        : std::runtime_error(message), status_(status), field_(std::move(field)) {}
    int status() const { return status_; }
    const std::string& field() const { return field_; }

private:
    int status_;
    std::string field_;
};

struct ImageEntry {
    ImageSample sample;
    std::filesystem::path file;  // absolute
};

/// Per-image annotation state persisted as one JSON file per image, written atomically.
/// Writes to one image are serialized; a re-POST by the same annotator replaces that
/// annotator's boxes and a different annotator appends.
class AnnotationStore {
public:
    AnnotationStore(std::vector<ImageEntry> images, std::filesystem::path dir, Summarizer& summarizer);

    struct View {
        std::string image_id;
        AnnotationState state = AnnotationState::Pending;
        std::vector<BoxAnnotation> annotations;
        std::optional<std::string> summary;
    };

    const std::vector<ImageEntry>& images() const { return images_; }
    const ImageEntry& image(const std::string& id) const;  // 404 when unknown
    View get(const std::string& id) const;

    /// 400 on schema violation, 404 for an unknown image, 409 once the image is summarized.
    View post_annotation(const Json& body);
    /// 409 unless at least one box has been stored.
    View summarize(const std::string& id);
    /// Every stored annotation in queue order, in the annotation file format.
    std::string export_jsonl() const;

private:
    struct Slot {
        mutable std::mutex mu;
        View view;
    };
    Slot& slot(const std::string& id) const;
    void persist(const View& v) const;
    void load(Slot& s) const;

    std::vector<ImageEntry> images_;
    std::filesystem::path dir_;
    Summarizer& summarizer_;
    std::mutex summarizer_mu_;
    std::map<std::string, std::unique_ptr<Slot>> slots_;
};

Json to_json(const AnnotationStore::View& v);

/// Fake images of the dataset with their resolved image files, in file order.
std::vector<ImageEntry> annotation_queue(const std::filesystem::path& dataset_file);

/// REST front end over the store; serves `ui_dir` statically when given.
class AnnotationService {
public:
    AnnotationService(AnnotationStore& store, std::filesystem::path ui_dir = {});
    ~AnnotationService();

    /// Binds to host:port (port 0 picks a free one); returns the bound port.
    int bind(const std::string& host, int port);
    /// Blocks until stop().
    void listen();
    void stop();

private:
    AnnotationStore& store_;
    std::unique_ptr<httplib::Server> server_;
};

}  // namespace forenx
