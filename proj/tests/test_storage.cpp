#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "consolidator/errors.hpp"
#include "consolidator/storage.hpp"
#include "consolidator/vit.hpp"
#include "oracles.hpp"

using namespace consolidator;

namespace {

std::vector<std::byte> bytes_of(std::initializer_list<int> v) {
    std::vector<std::byte> out;
    for (int b : v) out.push_back(std::byte(b));
    return out;
}

ViTModel<float> trained_like(std::uint64_t seed) {
    const auto cfg = ViTConfig::mini();
    auto m = attach_consolidators<float>(backbone_checkpoint(init_backbone<float>(cfg, seed)), cfg);
    std::uint64_t s = seed * 100;
    for (auto* l : m.layers()) oracle::randomize(*l, ++s);
    return m;
}

// Either decoding fails with a format error or the decoded object re-encodes
// to different bytes.
template <typename Decode, typename Encode>
void check_mutations(const std::vector<std::byte>& good, Decode decode, Encode encode, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::size_t> pos(0, good.size() - 1);
    std::uniform_int_distribution<int> mask(1, 255);
    for (int trial = 0; trial < 100; ++trial) {
        auto bad = good;
        const std::size_t at = pos(rng);
        bad[at] ^= std::byte(mask(rng));
        try {
            const auto back = encode(decode(bad));
            EXPECT_NE(back, good) << "undetected flip at byte " << at;
        } catch (const FormatError&) {
        }
    }
}

}  // namespace

TEST(Checkpoint, EmptyIsTwelveBytes) {
    const auto b = encode_checkpoint(Checkpoint{});
    EXPECT_EQ(b, bytes_of({'C', 'N', 'S', 'B', 1, 0, 0, 0, 0, 0, 0, 0}));
    EXPECT_EQ(decode_checkpoint(b).size(), 0u);
}

TEST(Checkpoint, SingleTensorLayout) {
    Checkpoint c;
    c.add("w", Tensor<float>({2, 2}, {1.0f, -2.0f, 0.5f, 3.0f}));
    const auto b = encode_checkpoint(c);
    ASSERT_EQ(b.size(), 51u);
    EXPECT_EQ(b[8], std::byte{1});    // count
    EXPECT_EQ(b[12], std::byte{1});   // name length
    EXPECT_EQ(b[16], std::byte{'w'});
    EXPECT_EQ(b[17], std::byte{1});   // f32
    EXPECT_EQ(b[18], std::byte{2});   // rank
    EXPECT_EQ(b[19], std::byte{2});
    EXPECT_EQ(b[27], std::byte{2});
    float v;
    std::memcpy(&v, b.data() + 35 + 4, 4);
    EXPECT_EQ(v, -2.0f);
    EXPECT_EQ(decode_checkpoint(b), c);
}

TEST(Checkpoint, DuplicateNamesRejected) {
    Checkpoint c;
    c.add("a", Tensor<float>({1}));
    EXPECT_THROW(c.add("a", Tensor<double>({1})), StructuralError);
}

TEST(Checkpoint, BadHeaderReportsOffset) {
    auto b = encode_checkpoint(Checkpoint{});
    b[0] = std::byte{'X'};
    try {
        decode_checkpoint(b);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 0u);
    }
    b = encode_checkpoint(Checkpoint{});
    b[4] = std::byte{2};
    EXPECT_THROW(decode_checkpoint(b), FormatError);
    b = encode_checkpoint(Checkpoint{});
    b.pop_back();
    EXPECT_THROW(decode_checkpoint(b), FormatError);
    b = encode_checkpoint(Checkpoint{});
    b.push_back(std::byte{0});
    EXPECT_THROW(decode_checkpoint(b), FormatError);
}

TEST(Checkpoint, MiniRoundTripIsBitExact) {
    const auto ckpt = model_checkpoint(trained_like(3));
    const auto b = encode_checkpoint(ckpt);
    EXPECT_EQ(encode_checkpoint(ckpt), b);
    const auto back = decode_checkpoint(b);
    EXPECT_EQ(back, ckpt);
    EXPECT_EQ(encode_checkpoint(back), b);

    Checkpoint mixed;
    mixed.add("d", oracle::randn<double>({3, 1, 2}, 1));
    mixed.add("negzero", Tensor<float>({2}, {-0.0f, 0.0f}));
    EXPECT_EQ(encode_checkpoint(decode_checkpoint(encode_checkpoint(mixed))), encode_checkpoint(mixed));
}

TEST(Checkpoint, FileRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "consolidator_test_ckpt.cnsb";
    const auto ckpt = backbone_checkpoint(init_backbone<double>(ViTConfig::mini(), 4));
    save_checkpoint(ckpt, path);
    EXPECT_EQ(load_checkpoint(path), ckpt);
    std::filesystem::remove(path);
    EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(Checkpoint, MutationsAreDetected) {
    const auto b = encode_checkpoint(model_checkpoint(trained_like(5)));
    check_mutations(b, [](const auto& x) { return decode_checkpoint(x); },
                    [](const Checkpoint& c) { return encode_checkpoint(c); }, 17);
}

TEST(Delta, ZeroInitNnzMatchesSupportUnion) {
    const auto cfg = ViTConfig::mini();
    const auto m = attach_consolidators<float>(backbone_checkpoint(init_backbone<float>(cfg, 1)), cfg);
    const auto delta = decode_delta(encode_delta(make_task_delta(m)));
    ASSERT_EQ(delta.layers.size(), 12u);
    const auto want = oracle::probe_support({8, 16}, 64, 64).size();
    for (const auto& l : delta.layers) {
        if (l.weight.rows == 64 && l.weight.cols == 64) {
            EXPECT_EQ(l.weight.nnz(), want) << l.name;
        }
    }
    EXPECT_EQ(delta.layers[4].weight.nnz(), oracle::probe_support({8, 16}, 64, 256).size());
}

TEST(Delta, RoundTripIsBitExact) {
    const auto delta = make_task_delta(trained_like(6));
    const auto b = encode_delta(delta);
    const auto back = decode_delta(b);
    EXPECT_EQ(back, delta);
    EXPECT_EQ(encode_delta(back), b);
    EXPECT_EQ(back.backbone_fingerprint, delta.backbone_fingerprint);

    const auto path = std::filesystem::temp_directory_path() / "consolidator_test_delta.cnsd";
    save_delta(delta, path);
    EXPECT_EQ(load_delta(path), delta);
    std::filesystem::remove(path);
}

TEST(Delta, HeaderLayout) {
    TaskDelta d;
    d.backbone_fingerprint = 0x0102030405060708ull;
    const auto b = encode_delta(d);
    EXPECT_EQ(std::string(reinterpret_cast<const char*>(b.data()), 4), "CNSD");
    EXPECT_EQ(b[4], std::byte{1});
    EXPECT_EQ(b[8], std::byte{0x08});
    EXPECT_EQ(b[15], std::byte{0x01});
    EXPECT_EQ(b.size(), 4u + 4 + 8 + 4 + 4);
}

TEST(Delta, UnsortedEntriesRejected) {
    TaskDelta d;
    LayerDelta l;
    l.name = "fc";
    l.weight = SparseWeightDelta{4, 4, {{0, 0, 1.0}, {0, 1, 2.0}}, {1}};
    l.bias = std::vector<double>(4, 0.0);
    d.layers.push_back(l);
    auto b = encode_delta(d);
    EXPECT_NO_THROW(decode_delta(b));
    // swap the two column fields so entries go (0,1), (0,0)
    const std::size_t first = b.size() - 4 - 24;
    std::swap(b[first + 4], b[first + 16]);
    EXPECT_THROW(decode_delta(b), FormatError);
}

TEST(Delta, MutationsAreDetected) {
    const auto b = encode_delta(make_task_delta(trained_like(7)));
    check_mutations(b, [](const auto& x) { return decode_delta(x); },
                    [](const TaskDelta& d) { return encode_delta(d); }, 19);
}
