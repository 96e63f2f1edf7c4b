#pragma once

#include <string>
#include <vector>

#include "radkd/model.hpp"
#include "radkd/random.hpp"
#include "radkd/training.hpp"

namespace testing {

// Vocabulary of `size` entries: PAD, UNK, w0, w1, ...
inline radkd::Vocabulary toy_vocab(std::size_t size = 20) {
    std::vector<std::string> toks{"<pad>", "<unk>"};
    for (std::size_t i = 0; toks.size() < size; ++i) toks.push_back("w" + std::to_string(i));
    return radkd::Vocabulary::from_tokens(toks);
}

inline radkd::StudentModel toy_model(std::uint64_t seed, radkd::EncoderKind enc, std::size_t classes,
                                     std::size_t dim = 4) {
    radkd::ModelConfig mc;
    mc.encoder = enc;
    mc.embed_dim = dim;
    mc.latent_dim = dim;
    mc.ff_dim = dim + 2;
    mc.num_classes = classes;
    mc.max_len = 8;
    mc.seed = seed;
    return radkd::StudentModel(mc, toy_vocab());
}

inline std::vector<radkd::Example> toy_batch(std::uint64_t seed, std::size_t n, std::size_t classes,
                                             std::size_t vocab = 20, std::size_t max_len = 8) {
    radkd::Rng rng(seed);
    std::vector<radkd::Example> batch;
    for (std::size_t i = 0; i < n; ++i) {
        radkd::TokenSeq t;
        t.ids.assign(max_len, 0);
        t.length = 1 + rng.below(max_len);
        for (std::size_t j = 0; j < t.length; ++j) t.ids[j] = static_cast<int>(1 + rng.below(vocab - 1));
        batch.push_back({t, static_cast<std::size_t>(rng.below(classes))});
    }
    return batch;
}

}  // namespace testing
