#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "seq2seg/tensor.hpp"

namespace seq2seg {

// H x W map of class indices. 255 is the conventional ignore value.
struct LabelMap {
    int h = 0, w = 0;
    std::vector<uint16_t> v;

    LabelMap() = default;
    LabelMap(int height, int width, uint16_t fill = 0)
        : h(height), w(width), v(static_cast<size_t>(height) * width, fill) {}
    uint16_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
    uint16_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    size_t pixels() const { return v.size(); }
};

struct GrayImage {
    int h = 0, w = 0;
    std::vector<uint8_t> px;

    GrayImage() = default;
    GrayImage(int height, int width, uint8_t fill = 0)
        : h(height), w(width), px(static_cast<size_t>(height) * width, fill) {}
    uint8_t& at(int y, int x) { return px[static_cast<size_t>(y) * w + x]; }
};

// --- netpbm images ---
// P6 carries RGB inputs, P5 carries label maps (class index as gray value)
// and rendered diagnostics. maxval is always 255.

Tensor read_ppm(const std::string& path);            // [H,W,3], values in [0,1]
void write_ppm(const std::string& path, const Tensor& img);
LabelMap read_pgm(const std::string& path);
void write_pgm(const std::string& path, const LabelMap& labels);
void write_pgm(const std::string& path, const GrayImage& img);

// --- STTN tensor container ---
// magic "STTN", version 0x01, dtype byte (0x00 float32, 0x01 uint16),
// rank byte, rank x uint32 little-endian dims, row-major little-endian payload.

enum class SttnType : uint8_t { F32 = 0x00, U16 = 0x01 };

struct SttnBlob {
    SttnType dtype = SttnType::F32;
    Shape dims;
    std::vector<float> f32;
    std::vector<uint16_t> u16;
};

void sttn_write(std::ostream& out, const Tensor& t);
void sttn_write_u16(std::ostream& out, const Shape& dims, std::span<const uint16_t> values);
SttnBlob sttn_read(std::istream& in);

void sttn_write_file(const std::string& path, const Tensor& t);
void sttn_write_u16_file(const std::string& path, const Shape& dims, std::span<const uint16_t> values);
SttnBlob sttn_read_file(const std::string& path);

// --- checkpoint archive ---
// count uint32, then per tensor: uint16 name length, UTF-8 name, STTN container.

struct NamedTensor {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

// --- config files ---
// Line-based `key = value` UTF-8 text. Blank lines and lines starting with '#'
// are skipped. Callers consume keys through the typed getters; anything left
// unconsumed is an unknown key and rejected by reject_unknown().

class ConfigMap {
public:
    static ConfigMap from_file(const std::string& path);
    static ConfigMap from_text(const std::string& text);

    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& fallback);
    int get_int(const std::string& key, int fallback);
    float get_float(const std::string& key, float fallback);
    bool get_bool(const std::string& key, bool fallback);
    uint64_t get_u64(const std::string& key, uint64_t fallback);
    std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback);
    std::vector<float> get_float_list(const std::string& key, std::vector<float> fallback);

    std::string require_str(const std::string& key);

    void reject_unknown() const;

private:
    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

}  // namespace seq2seg
