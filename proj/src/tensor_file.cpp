#include "arsim/tensor_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "arsim/errors.hpp"

namespace arsim {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

const Tensor* TensorFile::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t.value;
    }
    return nullptr;
}

const Tensor& TensorFile::at(const std::string& name, const std::string& path) const {
    const Tensor* t = find(name);
    if (t == nullptr) throw FileError(FileError::Kind::Format, path, "missing tensor '" + name + "'");
    return *t;
}

namespace {

template <class T>
void put(std::string& buf, T v) {
    char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    buf.append(raw, sizeof(T));
}

class Reader {
public:
    Reader(const std::string& data, const std::string& path) : data_(data), path_(path) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string bytes(size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }

private:
    void need(size_t n) const {
        if (pos_ + n > data_.size()) throw FileError(FileError::Kind::Truncated, path_, "unexpected end of file");
    }

    const std::string& data_;
    const std::string& path_;
    size_t pos_ = 0;
};

}  // namespace

void write_tensor_file(const std::string& path, const std::array<char, 4>& magic, const TensorFile& file) {
    std::string head;
    head.append(magic.data(), 4);
    put<uint32_t>(head, file.version);
    put<uint32_t>(head, static_cast<uint32_t>(file.header.size()));
    head += file.header;
    put<uint32_t>(head, static_cast<uint32_t>(file.tensors.size()));

    size_t table_size = 0;
    for (const auto& t : file.tensors) table_size += 4 + t.name.size() + 4 + 4 + 4 * t.value.shape().size() + 8;
    uint64_t offset = head.size() + table_size;
    for (const auto& t : file.tensors) {
        put<uint32_t>(head, static_cast<uint32_t>(t.name.size()));
        head += t.name;
        put<uint32_t>(head, 0);
        put<uint32_t>(head, static_cast<uint32_t>(t.value.shape().size()));
        for (int d : t.value.shape()) put<uint32_t>(head, static_cast<uint32_t>(d));
        put<uint64_t>(head, offset);
        offset += static_cast<uint64_t>(t.value.numel()) * sizeof(float);
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError(FileError::Kind::Io, path, "cannot open for writing");
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& t : file.tensors) {
        out.write(reinterpret_cast<const char*>(t.value.ptr()), static_cast<std::streamsize>(t.value.numel() * 4));
    }
    if (!out) throw FileError(FileError::Kind::Io, path, "write failed");
}

TensorFile read_tensor_file(const std::string& path, const std::array<char, 4>& magic, uint32_t max_version) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError(FileError::Kind::Io, path, "cannot open");
    const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    Reader r(data, path);
    if (data.size() < 4 || std::memcmp(data.data(), magic.data(), 4) != 0) {
        throw FileError(FileError::Kind::Format, path, "bad magic, expected '" + std::string(magic.data(), 4) + "'");
    }
    r.bytes(4);
    TensorFile file;
    file.version = r.get<uint32_t>();
    if (file.version == 0 || file.version > max_version) {
        throw FileError(FileError::Kind::Version, path,
                        "unsupported version " + std::to_string(file.version) + " (reader supports up to " +
                            std::to_string(max_version) + ")");
    }
    file.header = r.bytes(r.get<uint32_t>());
    const uint32_t n = r.get<uint32_t>();
    struct Entry {
        std::string name;
        Shape shape;
        uint64_t offset;
    };
    std::vector<Entry> entries;
    for (uint32_t i = 0; i < n; ++i) {
        Entry e;
        e.name = r.bytes(r.get<uint32_t>());
        const uint32_t dtype = r.get<uint32_t>();
        if (dtype != 0) throw FileError(FileError::Kind::Format, path, "tensor '" + e.name + "' has unknown dtype");
        const uint32_t rank = r.get<uint32_t>();
        if (rank == 0 || rank > 8) throw FileError(FileError::Kind::Format, path, "tensor '" + e.name + "' has bad rank");
        for (uint32_t k = 0; k < rank; ++k) {
            const uint32_t d = r.get<uint32_t>();
            if (d == 0 || d > (1u << 30)) throw FileError(FileError::Kind::Format, path, "tensor '" + e.name + "' has bad dims");
            e.shape.push_back(static_cast<int>(d));
        }
        e.offset = r.get<uint64_t>();
        entries.push_back(std::move(e));
    }
    for (auto& e : entries) {
        const uint64_t count = static_cast<uint64_t>(shape_numel(e.shape));
        if (e.offset > data.size() || count * 4 > data.size() - e.offset) {
            throw FileError(FileError::Kind::Truncated, path, "payload of '" + e.name + "' runs past end of file");
        }
        std::vector<float> values(count);
        std::memcpy(values.data(), data.data() + e.offset, count * 4);
        file.tensors.push_back({e.name, Tensor::from(e.shape, std::move(values))});
    }
    return file;
}

}  // namespace arsim
