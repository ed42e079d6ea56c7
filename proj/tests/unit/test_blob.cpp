#include "doctest_torch.hpp"

#include <torch/torch.h>

#include "bgvc/blob.hpp"
#include "bgvc/error.hpp"
#include "support.hpp"

using namespace bgvc;

TEST_SUITE("blob") {

TEST_CASE("serialise and read back") {
  blob::Blob b;
  b.kind = "demo";
  b.header = {{"a", 1}, {"name", "x"}};
  b.tensors = {{"f", torch::arange(6, torch::kFloat32).reshape({2, 3})},
               {"d", torch::tensor({1.5, -2.0}, torch::kDouble)},
               {"i", torch::tensor({int64_t(7)})}};
  auto bytes = blob::serialize(b);
  CHECK(std::string(bytes.data(), 8) == "BGVCBLOB");
  auto back = blob::deserialize(bytes, "demo");
  CHECK(back.kind == "demo");
  CHECK(back.header == b.header);
  REQUIRE(back.tensors.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back.tensors[i].first == b.tensors[i].first);
    CHECK(torch::equal(back.tensors[i].second, b.tensors[i].second));
  }
  CHECK(back.has("d"));
  CHECK_FALSE(back.has("zz"));
  CHECK_THROWS(back.tensor("zz"));
  CHECK(blob::serialize(back) == bytes);
}

TEST_CASE("damage is detected") {
  blob::Blob b;
  b.kind = "demo";
  b.tensors = {{"w", torch::ones({10})}};
  auto bytes = blob::serialize(b);
  CHECK_THROWS_AS(blob::deserialize(bytes, "other"), FormatError);
  for (size_t at : {size_t(0), size_t(9), bytes.size() / 2, bytes.size() - 1}) {
    auto bad = bytes;
    bad[at] ^= 0x40;
    CHECK_THROWS_AS(blob::deserialize(bad), FormatError);
  }
  for (size_t len : {size_t(0), size_t(5), bytes.size() - 8}) {
    std::vector<char> cut(bytes.begin(), bytes.begin() + long(len));
    CHECK_THROWS_AS(blob::deserialize(cut), FormatError);
  }
}

TEST_CASE("module hashing and loading") {
  torch::manual_seed(3);
  torch::nn::Linear a(4, 3), b(4, 3);
  CHECK(blob::hash_module(*a) != blob::hash_module(*b));
  blob::Blob bl;
  blob::append_module(bl, "lin", *a);
  blob::load_module(bl, "lin", *b);
  CHECK(blob::hash_module(*a) == blob::hash_module(*b));
  torch::nn::Linear c(5, 3);
  CHECK_THROWS_AS(blob::load_module(bl, "lin", *c), ConfigError);
  CHECK(blob::hex(0xabcULL).size() == 16);
}

} // TEST_SUITE
