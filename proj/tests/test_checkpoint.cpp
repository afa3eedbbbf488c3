#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "medk/checkpoint.hpp"
#include "medk/decode.hpp"
#include "test_util.hpp"

using namespace medk;
using namespace medk::testutil;

TEST_CASE("checkpoint round-trips byte-exactly") {
    Model m = init_model(tiny_cfg(17));
    std::string bytes = serialize_checkpoint(m);
    CHECK(bytes.substr(0, 4) == "MEDK");
    Model m2 = deserialize_checkpoint(bytes);
    CHECK(serialize_checkpoint(m2) == bytes);
    CHECK(weights_checksum(m) == weights_checksum(m2));
    CHECK(m2.cfg.vocab_size == m.cfg.vocab_size);
    CHECK(m2.cfg.rng_seed == m.cfg.rng_seed);
}

TEST_CASE("corrupt checkpoints are rejected") {
    Model m = init_model(tiny_cfg());
    std::string bytes = serialize_checkpoint(m);

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), DataError);

    std::string truncated = bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS_AS(deserialize_checkpoint(truncated), DataError);

    std::string trailing = bytes + "junk";
    CHECK_THROWS_AS(deserialize_checkpoint(trailing), DataError);
}

TEST_CASE("a loaded model decodes identically") {
    Model m = init_model(tiny_cfg(19));
    auto path = std::filesystem::temp_directory_path() / "medk_ckpt_test.medk";
    save_checkpoint(m, path.string());
    Model m2 = load_checkpoint(path.string());
    std::filesystem::remove(path);

    DecodeConfig dc;
    dc.tree = dense_tree({2, 2});
    dc.max_new_tokens = 12;
    dc.measure_overhead = false;
    DecodeResult a = decode(m, {1, 2, 3}, dc);
    DecodeResult b = decode(m2, {1, 2, 3}, dc);
    CHECK(a.tokens == b.tokens);
}
