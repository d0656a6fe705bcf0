#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "consolidator/tensor.hpp"

namespace consolidator {

enum class DType : std::uint8_t { F32 = 1, F64 = 2 };

struct CheckpointEntry {
    std::string name;
    std::variant<Tensor<float>, Tensor<double>> value;

    DType dtype() const { return value.index() == 0 ? DType::F32 : DType::F64; }
    const Shape& shape() const;
    std::size_t numel() const;

    template <typename T>
    Tensor<T> as() const {
        return std::visit([](const auto& t) { return tensor_cast<T>(t); }, value);
    }

    friend bool operator==(const CheckpointEntry&, const CheckpointEntry&) = default;
};

/// Ordered, uniquely named tensor collection.
class Checkpoint {
public:
    static constexpr std::uint32_t kVersion = 1;

    template <typename T>
    void add(std::string name, Tensor<T> tensor) {
        add_entry({std::move(name), std::move(tensor)});
    }
    void add_entry(CheckpointEntry entry);

    /// Replaces the value of an existing entry in place.
    void replace(const std::string& name, std::variant<Tensor<float>, Tensor<double>> value);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const CheckpointEntry& at(const std::string& name) const;
    const CheckpointEntry* find(const std::string& name) const;

    template <typename T>
    Tensor<T> get(const std::string& name) const {
        return at(name).as<T>();
    }

    const std::vector<CheckpointEntry>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }
    std::vector<std::string> names() const;
    std::size_t parameter_count() const;

    friend bool operator==(const Checkpoint& a, const Checkpoint& b) { return a.entries_ == b.entries_; }

private:
    std::vector<CheckpointEntry> entries_;
    std::map<std::string, std::size_t> index_;
};

/// 64-bit FNV-1a over (name, dtype, shape, raw values) of every tensor not
/// listed in `excluded`, visited in name order.
std::uint64_t fingerprint(const Checkpoint& ckpt, const std::vector<std::string>& excluded);

}  // namespace consolidator
