#include "consolidator/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <set>

namespace consolidator {

const Shape& CheckpointEntry::shape() const {
    return std::visit([](const auto& t) -> const Shape& { return t.shape(); }, value);
}

std::size_t CheckpointEntry::numel() const {
    return std::visit([](const auto& t) { return t.numel(); }, value);
}

void Checkpoint::add_entry(CheckpointEntry entry) {
    if (contains(entry.name)) throw StructuralError("duplicate tensor name '" + entry.name + "'");
    index_.emplace(entry.name, entries_.size());
    entries_.push_back(std::move(entry));
}

void Checkpoint::replace(const std::string& name, std::variant<Tensor<float>, Tensor<double>> value) {
    auto it = index_.find(name);
    if (it == index_.end()) throw StructuralError("no tensor named '" + name + "'");
    entries_[it->second].value = std::move(value);
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
    const auto* e = find(name);
    if (!e) throw StructuralError("checkpoint has no tensor named '" + name + "'");
    return *e;
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second];
}

std::vector<std::string> Checkpoint::names() const {
    std::vector<std::string> n;
    n.reserve(entries_.size());
    for (const auto& e : entries_) n.push_back(e.name);
    return n;
}

std::size_t Checkpoint::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.numel();
    return n;
}

namespace {

struct Fnv1a {
    std::uint64_t h = 0xcbf29ce484222325ULL;

    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            const unsigned char b = static_cast<unsigned char>(v >> (8 * i));
            bytes(&b, 1);
        }
    }
};

}  // namespace

std::uint64_t fingerprint(const Checkpoint& ckpt, const std::vector<std::string>& excluded) {
    const std::set<std::string> skip(excluded.begin(), excluded.end());
    std::vector<const CheckpointEntry*> order;
    for (const auto& e : ckpt.entries()) {
        if (!skip.count(e.name)) order.push_back(&e);
    }
    std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->name < b->name; });
    Fnv1a f;
    for (const auto* e : order) {
        f.u64(e->name.size());
        f.bytes(e->name.data(), e->name.size());
        f.u64(static_cast<std::uint64_t>(e->dtype()));
        f.u64(e->shape().size());
        for (auto x : e->shape()) f.u64(x);
        std::visit(
            [&](const auto& t) {
                for (auto v : t.data()) {
                    if constexpr (sizeof(v) == 4) {
                        f.u64(std::bit_cast<std::uint32_t>(v));
                    } else {
                        f.u64(std::bit_cast<std::uint64_t>(v));
                    }
                }
            },
            e->value);
    }
    return f.h;
}

}  // namespace consolidator
