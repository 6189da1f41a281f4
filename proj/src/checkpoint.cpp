#include "agrikd/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace agrikd {

namespace {

constexpr char kMagic[5] = {'A', 'G', 'K', 'D', '1'};

template <class T>
void put(std::string& out, T value) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    out.append(bytes, sizeof(T));
}

template <class T>
T take(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw DataError("checkpoint truncated");
    T value;
    std::memcpy(&value, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

}  // namespace

std::string checkpoint_bytes(const NamedParams& params) {
    std::string out;
    out.append(kMagic, sizeof kMagic);
    put<std::uint64_t>(out, params.size());
    for (const auto& [name, tensor] : params) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.append(name);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.ndim()));
        for (std::size_t d : tensor.shape()) put<std::uint64_t>(out, d);
        for (double v : tensor.data()) put<double>(out, v);
    }
    return out;
}

void save_checkpoint(const std::string& path, const NamedParams& params) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint: " + path);
    const std::string bytes = checkpoint_bytes(params);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

NamedParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    const std::string bytes = buf.str();
    std::size_t pos = 0;
    if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw DataError(path + ": not a checkpoint file (bad magic)");
    }
    pos = sizeof kMagic;
    const auto count = take<std::uint64_t>(bytes, pos);
    NamedParams params;
    params.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto name_len = take<std::uint32_t>(bytes, pos);
        if (pos + name_len > bytes.size()) throw DataError("checkpoint truncated");
        std::string name(bytes.data() + pos, name_len);
        pos += name_len;
        const auto rank = take<std::uint32_t>(bytes, pos);
        Shape shape(rank);
        for (auto& d : shape) d = take<std::uint64_t>(bytes, pos);
        std::vector<double> values(shape_numel(shape));
        for (auto& v : values) v = take<double>(bytes, pos);
        params.emplace_back(std::move(name), Tensor::from_data(shape, std::move(values)));
    }
    return params;
}

void restore_parameters(const NamedParams& target, const NamedParams& source) {
    if (target.size() != source.size()) {
        throw DataError("checkpoint has " + std::to_string(source.size()) + " entries, model expects " +
                        std::to_string(target.size()));
    }
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (target[i].first != source[i].first) {
            throw DataError("checkpoint entry '" + source[i].first + "' does not match parameter '" +
                            target[i].first + "'");
        }
        if (target[i].second.shape() != source[i].second.shape()) {
            throw DataError("checkpoint entry '" + source[i].first + "' shape mismatch");
        }
        Tensor dst = target[i].second;
        dst.mutable_data() = source[i].second.data();
    }
}

}  // namespace agrikd
