#include "seq2seg/io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace seq2seg {

namespace {

void put_u16(std::ostream& out, uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                                static_cast<unsigned char>(v >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
}

void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint16_t get_u16(std::istream& in, const char* what) {
    unsigned char b[2];
    if (!in.read(reinterpret_cast<char*>(b), 2)) throw IoError(std::string("truncated ") + what);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t get_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError(std::string("truncated ") + what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

// netpbm token reader: skips whitespace and '#' comments.
int read_pnm_int(std::istream& in, const std::string& path) {
    int c = in.get();
    for (;;) {
        while (c != EOF && std::isspace(c)) c = in.get();
        if (c == '#') {
            while (c != EOF && c != '\n') c = in.get();
            continue;
        }
        break;
    }
    if (c == EOF || !std::isdigit(c)) throw IoError(path + ": corrupt header");
    int value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        c = in.get();
    }
    return value;
}

std::ifstream open_read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(path + ": cannot open for reading");
    return in;
}

std::ofstream open_write(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(path + ": cannot open for writing");
    return out;
}

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            parts.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(trim(cur));
    return parts;
}

}  // namespace

Tensor read_ppm(const std::string& path) {
    std::ifstream in = open_read(path);
    char magic[2];
    if (!in.read(magic, 2) || magic[0] != 'P' || magic[1] != '6')
        throw IoError(path + ": not a P6 image");
    const int w = read_pnm_int(in, path);
    const int h = read_pnm_int(in, path);
    const int maxval = read_pnm_int(in, path);
    if (maxval != 255) throw IoError(path + ": unsupported maxval " + std::to_string(maxval));
    if (w <= 0 || h <= 0) throw IoError(path + ": bad dimensions");
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h * 3);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw IoError(path + ": corrupt file (truncated pixel data)");
    Tensor img = Tensor::zeros({h, w, 3});
    float* dst = img.data();
    for (size_t i = 0; i < raw.size(); ++i) dst[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

void write_ppm(const std::string& path, const Tensor& img) {
    if (img.rank() != 3 || img.dim(2) != 3)
        throw ShapeError("write_ppm: expected [H,W,3], got " + img.shape_str());
    std::ofstream out = open_write(path);
    out << "P6\n" << img.dim(1) << " " << img.dim(0) << "\n255\n";
    const float* src = img.data();
    std::vector<unsigned char> raw(img.numel());
    for (size_t i = 0; i < raw.size(); ++i) {
        const float v = std::clamp(src[i], 0.0f, 1.0f);
        raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw IoError(path + ": write failed");
}

LabelMap read_pgm(const std::string& path) {
    std::ifstream in = open_read(path);
    char magic[2];
    if (!in.read(magic, 2) || magic[0] != 'P' || magic[1] != '5')
        throw IoError(path + ": not a P5 image");
    const int w = read_pnm_int(in, path);
    const int h = read_pnm_int(in, path);
    const int maxval = read_pnm_int(in, path);
    if (maxval != 255) throw IoError(path + ": unsupported maxval " + std::to_string(maxval));
    if (w <= 0 || h <= 0) throw IoError(path + ": bad dimensions");
    std::vector<unsigned char> raw(static_cast<size_t>(w) * h);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw IoError(path + ": corrupt file (truncated pixel data)");
    LabelMap labels(h, w);
    for (size_t i = 0; i < raw.size(); ++i) labels.v[i] = raw[i];
    return labels;
}

void write_pgm(const std::string& path, const LabelMap& labels) {
    std::ofstream out = open_write(path);
    out << "P5\n" << labels.w << " " << labels.h << "\n255\n";
    std::vector<unsigned char> raw(labels.pixels());
    for (size_t i = 0; i < raw.size(); ++i) {
        if (labels.v[i] > 255)
            throw IoError(path + ": label " + std::to_string(labels.v[i]) + " does not fit P5");
        raw[i] = static_cast<unsigned char>(labels.v[i]);
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw IoError(path + ": write failed");
}

void write_pgm(const std::string& path, const GrayImage& img) {
    std::ofstream out = open_write(path);
    out << "P5\n" << img.w << " " << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
    if (!out) throw IoError(path + ": write failed");
}

// --- STTN ---

namespace {
constexpr char kMagic[4] = {'S', 'T', 'T', 'N'};
constexpr uint8_t kVersion = 0x01;

void write_header(std::ostream& out, SttnType dtype, const Shape& dims) {
    out.write(kMagic, 4);
    out.put(static_cast<char>(kVersion));
    out.put(static_cast<char>(dtype));
    out.put(static_cast<char>(dims.size()));
    for (int d : dims) put_u32(out, static_cast<uint32_t>(d));
}
}  // namespace

void sttn_write(std::ostream& out, const Tensor& t) {
    write_header(out, SttnType::F32, t.shape());
    const float* src = t.data();
    for (size_t i = 0; i < t.numel(); ++i) {
        uint32_t bits;
        std::memcpy(&bits, &src[i], 4);
        put_u32(out, bits);
    }
}

void sttn_write_u16(std::ostream& out, const Shape& dims, std::span<const uint16_t> values) {
    if (shape_numel(dims) != values.size())
        throw ShapeError("sttn_write_u16: dims " + shape_to_string(dims) + " do not match payload");
    write_header(out, SttnType::U16, dims);
    for (uint16_t v : values) put_u16(out, v);
}

SttnBlob sttn_read(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("not an STTN container (bad magic)");
    const int version = in.get();
    if (version != kVersion) throw IoError("unsupported STTN version " + std::to_string(version));
    const int dtype = in.get();
    if (dtype != 0x00 && dtype != 0x01) throw IoError("unsupported STTN dtype " + std::to_string(dtype));
    const int rank = in.get();
    if (rank < 0 || rank > 8) throw IoError("implausible STTN rank " + std::to_string(rank));
    SttnBlob blob;
    blob.dtype = static_cast<SttnType>(dtype);
    for (int i = 0; i < rank; ++i) {
        const uint32_t d = get_u32(in, "STTN dims");
        if (d == 0 || d > (1u << 28)) throw IoError("implausible STTN dimension " + std::to_string(d));
        blob.dims.push_back(static_cast<int>(d));
    }
    const size_t n = shape_numel(blob.dims);
    if (blob.dtype == SttnType::F32) {
        blob.f32.resize(n);
        for (size_t i = 0; i < n; ++i) {
            const uint32_t bits = get_u32(in, "STTN payload");
            std::memcpy(&blob.f32[i], &bits, 4);
        }
    } else {
        blob.u16.resize(n);
        for (size_t i = 0; i < n; ++i) blob.u16[i] = get_u16(in, "STTN payload");
    }
    return blob;
}

void sttn_write_file(const std::string& path, const Tensor& t) {
    std::ofstream out = open_write(path);
    sttn_write(out, t);
    if (!out) throw IoError(path + ": write failed");
}

void sttn_write_u16_file(const std::string& path, const Shape& dims, std::span<const uint16_t> values) {
    std::ofstream out = open_write(path);
    sttn_write_u16(out, dims, values);
    if (!out) throw IoError(path + ": write failed");
}

SttnBlob sttn_read_file(const std::string& path) {
    std::ifstream in = open_read(path);
    try {
        return sttn_read(in);
    } catch (const IoError& e) {
        throw IoError(path + ": " + e.what());
    }
}

// --- checkpoint archive ---

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream out = open_write(path);
    put_u32(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& nt : tensors) {
        if (nt.name.size() > 0xffff) throw IoError("tensor name too long: " + nt.name);
        put_u16(out, static_cast<uint16_t>(nt.name.size()));
        out.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
        sttn_write(out, nt.tensor);
    }
    if (!out) throw IoError(path + ": write failed");
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
    std::ifstream in = open_read(path);
    const uint32_t count = get_u32(in, "checkpoint count");
    if (count > (1u << 20)) throw IoError(path + ": implausible tensor count");
    std::map<std::string, Tensor> result;
    for (uint32_t i = 0; i < count; ++i) {
        const uint16_t len = get_u16(in, "checkpoint name length");
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw IoError(path + ": truncated tensor name");
        SttnBlob blob = sttn_read(in);
        if (blob.dtype != SttnType::F32)
            throw IoError(path + ": checkpoint tensor '" + name + "' is not float32");
        result.emplace(name, Tensor::from_data(blob.dims, std::move(blob.f32)));
    }
    return result;
}

// --- config files ---

ConfigMap ConfigMap::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open config file");
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return from_text(buf.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

ConfigMap ConfigMap::from_text(const std::string& text) {
    ConfigMap cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected `key = value`");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (cfg.values_.count(key))
            throw ConfigError("line " + std::to_string(lineno) + ": duplicate key `" + key + "`");
        cfg.values_[key] = value;
    }
    return cfg;
}

void ConfigMap::set(const std::string& key, const std::string& value) { values_[key] = value; }

std::string ConfigMap::get_str(const std::string& key, const std::string& fallback) {
    consumed_.insert(key);
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

std::string ConfigMap::require_str(const std::string& key) {
    consumed_.insert(key);
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing required key `" + key + "`");
    return it->second;
}

int ConfigMap::get_int(const std::string& key, int fallback) {
    const std::string s = get_str(key, "");
    if (s.empty()) return fallback;
    try {
        size_t pos = 0;
        const int v = std::stoi(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key `" + key + "`: `" + s + "` is not an integer");
    }
}

uint64_t ConfigMap::get_u64(const std::string& key, uint64_t fallback) {
    const std::string s = get_str(key, "");
    if (s.empty()) return fallback;
    try {
        size_t pos = 0;
        const uint64_t v = std::stoull(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key `" + key + "`: `" + s + "` is not an unsigned integer");
    }
}

float ConfigMap::get_float(const std::string& key, float fallback) {
    const std::string s = get_str(key, "");
    if (s.empty()) return fallback;
    try {
        size_t pos = 0;
        const float v = std::stof(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key `" + key + "`: `" + s + "` is not a number");
    }
}

bool ConfigMap::get_bool(const std::string& key, bool fallback) {
    const std::string s = get_str(key, "");
    if (s.empty()) return fallback;
    if (s == "true" || s == "on" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "off" || s == "0" || s == "no") return false;
    throw ConfigError("key `" + key + "`: `" + s + "` is not a boolean");
}

std::vector<int> ConfigMap::get_int_list(const std::string& key, std::vector<int> fallback) {
    const std::string s = get_str(key, "");
    if (s.empty()) return fallback;
    std::vector<int> out;
    for (const auto& p : split_commas(s)) {
        try {
            out.push_back(std::stoi(p));
        } catch (const std::exception&) {
            throw ConfigError("key `" + key + "`: `" + p + "` is not an integer");
        }
    }
    return out;
}

std::vector<float> ConfigMap::get_float_list(const std::string& key, std::vector<float> fallback) {
    const std::string s = get_str(key, "");
    if (s.empty()) return fallback;
    std::vector<float> out;
    for (const auto& p : split_commas(s)) {
        try {
            out.push_back(std::stof(p));
        } catch (const std::exception&) {
            throw ConfigError("key `" + key + "`: `" + p + "` is not a number");
        }
    }
    return out;
}

void ConfigMap::reject_unknown() const {
    std::string unknown;
    for (const auto& [key, value] : values_) {
        if (!consumed_.count(key)) {
            if (!unknown.empty()) unknown += ", ";
            unknown += key;
        }
    }
    if (!unknown.empty()) throw ConfigError("unknown config keys: " + unknown);
}

}  // namespace seq2seg
