#include "agrikd/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace agrikd {

namespace {

// 3x3 box filter; border windows average over the in-bounds taps only.
void box_smooth(std::vector<double>& img, std::size_t side, std::size_t ch) {
    std::vector<double> out(img.size());
    for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
            for (std::size_t c = 0; c < ch; ++c) {
                double acc = 0.0;
                std::size_t n = 0;
                for (int dy = -1; dy <= 1; ++dy) {
                    for (int dx = -1; dx <= 1; ++dx) {
                        const long yy = static_cast<long>(y) + dy;
                        const long xx = static_cast<long>(x) + dx;
                        if (yy < 0 || xx < 0 || yy >= static_cast<long>(side) ||
                            xx >= static_cast<long>(side))
                            continue;
                        acc += img[(static_cast<std::size_t>(yy) * side + static_cast<std::size_t>(xx)) * ch + c];
                        ++n;
                    }
                }
                out[(y * side + x) * ch + c] = acc / static_cast<double>(n);
            }
        }
    }
    img = std::move(out);
}

std::vector<std::vector<double>> make_templates(const SyntheticSpec& spec) {
    Rng rng(spec.seed);
    const std::size_t pixels = spec.image_side * spec.image_side * spec.channels;
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::vector<std::vector<double>> templates;
    templates.reserve(spec.per_class_counts.size());
    for (std::size_t c = 0; c < spec.per_class_counts.size(); ++c) {
        std::vector<double> t(pixels);
        for (auto& v : t) v = uniform(rng);
        box_smooth(t, spec.image_side, spec.channels);
        templates.push_back(std::move(t));
    }
    return templates;
}

void validate_spec(const SyntheticSpec& spec) {
    if (spec.per_class_counts.empty()) throw ConfigError("synthetic spec needs at least one class");
    for (std::size_t n : spec.per_class_counts) {
        if (n == 0) throw ConfigError("synthetic per-class counts must be >= 1");
    }
    if (spec.noise_sigma < 0) throw ConfigError("synthetic noise sigma must be >= 0");
    if (spec.image_side == 0 || spec.channels == 0) throw ConfigError("synthetic image shape must be positive");
}

}  // namespace

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(num_classes(), 0);
    for (std::size_t label : labels) ++counts.at(label);
    return counts;
}

Tensor Dataset::gather_images(const std::vector<std::size_t>& indices) const {
    const std::size_t pixels = images.numel() / size();
    std::vector<double> out(indices.size() * pixels);
    const auto& src = images.data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= size()) throw ContractError("dataset index out of range");
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * pixels), pixels,
                    out.begin() + static_cast<std::ptrdiff_t>(i * pixels));
    }
    return Tensor::from_data({indices.size(), images.dim(1), images.dim(2), images.dim(3)},
                             std::move(out));
}

std::vector<std::size_t> Dataset::gather_labels(const std::vector<std::size_t>& indices) const {
    std::vector<std::size_t> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(labels.at(i));
    return out;
}

Tensor synthetic_templates(const SyntheticSpec& spec) {
    validate_spec(spec);
    auto templates = make_templates(spec);
    std::vector<double> flat;
    flat.reserve(templates.size() * templates.front().size());
    for (const auto& t : templates) flat.insert(flat.end(), t.begin(), t.end());
    return Tensor::from_data(
        {templates.size(), spec.image_side, spec.image_side, spec.channels}, std::move(flat));
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
    validate_spec(spec);
    const std::size_t pixels = spec.image_side * spec.image_side * spec.channels;
    auto templates = make_templates(spec);

    std::size_t total = 0;
    for (std::size_t n : spec.per_class_counts) total += n;

    // Noise comes from a stream separate from the template stream, so the
    // templates stay fixed when counts change.
    Rng rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> noise(0.0, 1.0);

    std::vector<double> data(total * pixels);
    std::vector<std::size_t> labels(total);
    std::size_t row = 0;
    for (std::size_t c = 0; c < spec.per_class_counts.size(); ++c) {
        for (std::size_t i = 0; i < spec.per_class_counts[c]; ++i, ++row) {
            labels[row] = c;
            double* dst = data.data() + row * pixels;
            for (std::size_t p = 0; p < pixels; ++p) {
                const double v = templates[c][p] + (spec.noise_sigma > 0 ? spec.noise_sigma * noise(rng) : 0.0);
                dst[p] = std::clamp(v, 0.0, 1.0);
            }
        }
    }

    Dataset ds;
    ds.images = Tensor::from_data({total, spec.image_side, spec.image_side, spec.channels},
                                  std::move(data));
    ds.labels = std::move(labels);
    for (std::size_t c = 0; c < spec.per_class_counts.size(); ++c) {
        ds.class_names.push_back("class_" + std::to_string(c));
    }
    std::ostringstream prov;
    prov << "synthetic(seed=" << spec.seed << ", sigma=" << spec.noise_sigma << ", counts=";
    for (std::size_t c = 0; c < spec.per_class_counts.size(); ++c) {
        prov << (c ? "," : "") << spec.per_class_counts[c];
    }
    prov << ")";
    ds.provenance = prov.str();
    return ds;
}

// ---- CSV ----------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    fields.push_back(cur);
    return fields;
}

}  // namespace

Dataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset file: " + path);

    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty file");
    const auto header = split_csv_line(line);
    if (header.empty() || header[0] != "label") {
        throw DataError(path + ":1: header must start with 'label'");
    }
    const std::size_t pixels = header.size() - 1;
    if (pixels == 0) throw DataError(path + ":1: header has no pixel columns");
    for (std::size_t i = 1; i < header.size(); ++i) {
        if (header[i] != "p" + std::to_string(i - 1)) {
            throw DataError(path + ":1: unknown header column '" + header[i] + "'");
        }
    }

    std::size_t side = 0, channels = 0;
    for (std::size_t ch : {std::size_t{1}, std::size_t{3}}) {
        if (pixels % ch) continue;
        const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(pixels / ch))));
        if (s * s * ch == pixels) {
            side = s;
            channels = ch;
            break;
        }
    }
    if (side == 0) {
        throw DataError(path + ":1: pixel count " + std::to_string(pixels) +
                        " is not a square image (1 or 3 channels)");
    }

    std::vector<double> data;
    std::vector<std::size_t> labels;
    std::vector<std::string> names;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != pixels + 1) {
            throw DataError(path + ":" + std::to_string(line_no) + ": expected " +
                            std::to_string(pixels + 1) + " fields, got " + std::to_string(fields.size()));
        }
        const std::string& name = fields[0];
        auto it = std::find(names.begin(), names.end(), name);
        std::size_t label;
        if (it == names.end()) {
            label = names.size();
            names.push_back(name);
        } else {
            label = static_cast<std::size_t>(it - names.begin());
        }
        labels.push_back(label);
        for (std::size_t i = 1; i < fields.size(); ++i) {
            double v;
            try {
                std::size_t used = 0;
                v = std::stod(fields[i], &used);
                if (used != fields[i].size()) throw std::invalid_argument(fields[i]);
            } catch (const std::exception&) {
                throw DataError(path + ":" + std::to_string(line_no) + ": bad pixel value '" + fields[i] + "'");
            }
            if (v < 0.0 || v > 1.0) {
                throw DataError(path + ":" + std::to_string(line_no) + ": pixel " +
                                std::to_string(i - 1) + " out of [0,1]: " + fields[i]);
            }
            data.push_back(v);
        }
    }
    if (labels.empty()) throw DataError(path + ": no samples");

    Dataset ds;
    ds.images = Tensor::from_data({labels.size(), side, side, channels}, std::move(data));
    ds.labels = std::move(labels);
    ds.class_names = std::move(names);
    ds.provenance = path;
    return ds;
}

void save_csv(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write dataset file: " + path);
    const std::size_t pixels = ds.images.numel() / ds.size();
    out << "label";
    for (std::size_t i = 0; i < pixels; ++i) out << ",p" << i;
    out << "\n";
    out.precision(17);
    const auto& data = ds.images.data();
    for (std::size_t r = 0; r < ds.size(); ++r) {
        out << ds.class_names.at(ds.labels[r]);
        for (std::size_t i = 0; i < pixels; ++i) out << ',' << data[r * pixels + i];
        out << "\n";
    }
}

std::uint64_t dataset_checksum(const Dataset& ds) {
    // FNV-1a over image bits and labels
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* bytes, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(bytes);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (double v : ds.images.data()) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        mix(&bits, sizeof bits);
    }
    for (std::size_t label : ds.labels) {
        const auto v = static_cast<std::uint64_t>(label);
        mix(&v, sizeof v);
    }
    return h;
}

std::string dataset_manifest_json(const Dataset& ds) {
    nlohmann::json j;
    j["num_samples"] = ds.size();
    j["image_side"] = ds.image_side();
    j["channels"] = ds.channels();
    j["provenance"] = ds.provenance;
    nlohmann::json counts = nlohmann::json::object();
    const auto c = ds.class_counts();
    for (std::size_t i = 0; i < c.size(); ++i) counts[ds.class_names[i]] = c[i];
    j["class_counts"] = counts;
    j["label_order"] = ds.class_names;
    std::ostringstream hex;
    hex << std::hex << dataset_checksum(ds);
    j["checksum"] = hex.str();
    return j.dump(2);
}

}  // namespace agrikd
