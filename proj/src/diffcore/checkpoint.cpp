#include "memtrace/diffcore/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

#include "memtrace/errors.hpp"

namespace memtrace::diffcore {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'M', 'T', 'C', 'K'};
constexpr uint16_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
bool read_pod(std::istream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return static_cast<bool>(is);
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw RunError("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 4);
    write_pod(os, kVersion);
    for (const auto& [name, arr] : state.params) {
        if (name.size() > 0xffff) throw RunError("parameter name too long");
        write_pod(os, static_cast<uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_pod(os, static_cast<uint8_t>(arr.shape.size()));
        for (int d : arr.shape) write_pod(os, static_cast<uint32_t>(d));
        os.write(reinterpret_cast<const char*>(arr.data.data()),
                 static_cast<std::streamsize>(arr.data.size() * sizeof(float)));
    }
    if (!os) throw RunError("checkpoint write failed: " + path);
}

ModelState load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw RunError("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("bad checkpoint magic: " + path);
    uint16_t version = 0;
    if (!read_pod(is, version) || version != kVersion)
        throw FormatError("unsupported checkpoint version in " + path);
    ModelState st;
    while (true) {
        uint16_t len = 0;
        if (!read_pod(is, len)) break;  // clean EOF
        std::string name(len, '\0');
        is.read(name.data(), len);
        uint8_t rank = 0;
        if (!read_pod(is, rank)) throw FormatError("truncated checkpoint: " + path);
        std::vector<int> shape(rank);
        size_t numel = 1;
        for (int i = 0; i < rank; ++i) {
            uint32_t d = 0;
            if (!read_pod(is, d)) throw FormatError("truncated checkpoint: " + path);
            shape[i] = static_cast<int>(d);
            numel *= d;
        }
        Tensor t;
        t.shape = std::move(shape);
        t.data.resize(numel);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(numel * sizeof(float)));
        if (!is) throw FormatError("truncated checkpoint: " + path);
        st.params[name] = std::move(t);
    }
    return st;
}

}  // namespace memtrace::diffcore
