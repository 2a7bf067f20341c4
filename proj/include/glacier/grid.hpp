#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "glacier/error.hpp"

namespace glacier {

/// Row-major 2-D grid.
template <class T>
class Grid {
public:
    Grid() = default;
    Grid(std::size_t width, std::size_t height, T fill = T{})
        : width_(width), height_(height), data_(width * height, fill) {}
    Grid(std::size_t width, std::size_t height, std::vector<T> data)
        : width_(width), height_(height), data_(std::move(data)) {
        if (data_.size() != width_ * height_)
            throw ShapeError("grid data has " + std::to_string(data_.size()) + " cells, expected " +
                             std::to_string(width_ * height_));
    }

    std::size_t width() const noexcept { return width_; }
    std::size_t height() const noexcept { return height_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool same_shape(const Grid& other) const noexcept {
        return width_ == other.width_ && height_ == other.height_;
    }
    template <class U>
    bool same_shape(const Grid<U>& other) const noexcept {
        return width_ == other.width() && height_ == other.height();
    }

    T& operator()(std::size_t row, std::size_t col) { return data_[row * width_ + col]; }
    const T& operator()(std::size_t row, std::size_t col) const { return data_[row * width_ + col]; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    bool operator==(const Grid&) const = default;

private:
    std::size_t width_ = 0;
    std::size_t height_ = 0;
    std::vector<T> data_;
};

/// Dense channels x height x width tensor.
template <class T>
class Tensor3 {
public:
    Tensor3() = default;
    Tensor3(std::size_t channels, std::size_t height, std::size_t width, T fill = T{})
        : c_(channels), h_(height), w_(width), data_(channels * height * width, fill) {}

    std::size_t channels() const noexcept { return c_; }
    std::size_t height() const noexcept { return h_; }
    std::size_t width() const noexcept { return w_; }
    std::size_t plane_size() const noexcept { return h_ * w_; }
    std::size_t size() const noexcept { return data_.size(); }

    T& operator()(std::size_t c, std::size_t y, std::size_t x) { return data_[(c * h_ + y) * w_ + x]; }
    const T& operator()(std::size_t c, std::size_t y, std::size_t x) const {
        return data_[(c * h_ + y) * w_ + x];
    }

    std::span<T> plane(std::size_t c) { return {data_.data() + c * h_ * w_, h_ * w_}; }
    std::span<const T> plane(std::size_t c) const { return {data_.data() + c * h_ * w_, h_ * w_}; }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    bool operator==(const Tensor3&) const = default;

private:
    std::size_t c_ = 0, h_ = 0, w_ = 0;
    std::vector<T> data_;
};

/// Per-pixel class codes used throughout: background, clean ice, debris.
enum class GlacierClass : std::uint8_t { background = 0, clean_ice = 1, debris = 2 };

using MaskGrid = Grid<std::uint8_t>;

inline std::string class_name(GlacierClass c) {
    switch (c) {
        case GlacierClass::background: return "background";
        case GlacierClass::clean_ice: return "clean_ice";
        case GlacierClass::debris: return "debris";
    }
    return "background";
}

inline GlacierClass parse_class(const std::string& name) {
    if (name == "clean_ice") return GlacierClass::clean_ice;
    if (name == "debris") return GlacierClass::debris;
    if (name == "background") return GlacierClass::background;
    throw ConfigError("unknown class tag '" + name + "'");
}

}  // namespace glacier
