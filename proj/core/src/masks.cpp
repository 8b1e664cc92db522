#include "blockdiff/masks.hpp"

#include <stdexcept>

namespace blockdiff {

AttnMask AttnMask::falses(int nq, int nk) {
    if (nq < 1 || nk < 1) {
        throw std::invalid_argument("AttnMask: dimensions must be >= 1");
    }
    AttnMask m;
    m.n_query = nq;
    m.n_key = nk;
    m.allow.assign(static_cast<size_t>(nq) * nk, 0);
    return m;
}

AttnMask AttnMask::from_predicate(int nq, int nk, const std::function<bool(int, int)>& pred) {
    AttnMask m = falses(nq, nk);
    for (int q = 0; q < nq; ++q) {
        for (int k = 0; k < nk; ++k) {
            if (pred(q, k)) {
                m.set(q, k, true);
            }
        }
    }
    return m;
}

void AttnMask::validate() const {
    for (int q = 0; q < n_query; ++q) {
        bool any = false;
        for (int k = 0; k < n_key; ++k) {
            if (at(q, k)) {
                any = true;
                break;
            }
        }
        if (!any) {
            throw std::runtime_error("AttnMask: query row " + std::to_string(q) + " allows no key");
        }
    }
}

std::string AttnMask::to_text_grid() const {
    std::string out;
    out.reserve(static_cast<size_t>(n_query) * (n_key + 1));
    for (int q = 0; q < n_query; ++q) {
        for (int k = 0; k < n_key; ++k) {
            out.push_back(at(q, k) ? '#' : '.');
        }
        out.push_back('\n');
    }
    return out;
}

AttnMask causal_mask(int n) {
    if (n < 1) {
        throw std::invalid_argument("causal_mask: n must be >= 1");
    }
    AttnMask m = AttnMask::falses(n, n);
    for (int q = 0; q < n; ++q) {
        for (int k = 0; k <= q; ++k) {
            m.set(q, k, true);
        }
    }
    m.validate();
    return m;
}

AttnMask full_diffusion_mask(int prompt_len, int answer_len) {
    if (prompt_len < 0 || answer_len < 1) {
        throw std::invalid_argument("full_diffusion_mask: need prompt_len >= 0, answer_len >= 1");
    }
    const int n = prompt_len + answer_len;
    AttnMask m = AttnMask::falses(n, n);
    for (int q = 0; q < prompt_len; ++q) {
        for (int k = 0; k <= q; ++k) {
            m.set(q, k, true);
        }
    }
    for (int q = prompt_len; q < n; ++q) {
        for (int k = 0; k < n; ++k) {
            m.set(q, k, true);
        }
    }
    m.validate();
    return m;
}

static void check_block_args(int prompt_len, int answer_len, int block_size) {
    if (prompt_len < 0 || answer_len < 1 || block_size < 1) {
        throw std::invalid_argument("mask: bad prompt/answer/block sizes");
    }
    if (answer_len % block_size != 0) {
        throw std::invalid_argument("mask: answer_len must be divisible by block_size");
    }
}

AttnMask block_causal_mask(int prompt_len, int answer_len, int block_size) {
    check_block_args(prompt_len, answer_len, block_size);
    const int n = prompt_len + answer_len;
    AttnMask m = AttnMask::falses(n, n);
    for (int q = 0; q < prompt_len; ++q) {
        for (int k = 0; k <= q; ++k) {
            m.set(q, k, true);
        }
    }
    for (int q = prompt_len; q < n; ++q) {
        const int qb = (q - prompt_len) / block_size;
        for (int k = 0; k < prompt_len; ++k) {
            m.set(q, k, true);
        }
        for (int k = prompt_len; k < n; ++k) {
            if ((k - prompt_len) / block_size <= qb) {
                m.set(q, k, true);
            }
        }
    }
    m.validate();
    return m;
}

AttnMask hybrid_training_mask(int prompt_len, int answer_len, int block_size) {
    check_block_args(prompt_len, answer_len, block_size);
    const int P = prompt_len;
    const int L = answer_len;
    const int n = P + 2 * L;
    const AttnMask clean_part = block_causal_mask(P, L, block_size);

    AttnMask m = AttnMask::falses(n, n);
    // prompt and clean rows: block causal over [prompt | clean], noisy keys stay off
    for (int q = 0; q < P + L; ++q) {
        for (int k = 0; k < P + L; ++k) {
            if (clean_part.at(q, k)) {
                m.set(q, k, true);
            }
        }
    }
    // noisy rows
    for (int q = P + L; q < n; ++q) {
        const int qb = (q - P - L) / block_size;
        for (int k = 0; k < P; ++k) {
            m.set(q, k, true);
        }
        for (int k = P; k < P + L; ++k) {  // clean keys: strictly earlier blocks
            if ((k - P) / block_size < qb) {
                m.set(q, k, true);
            }
        }
        for (int k = P + L; k < n; ++k) {  // noisy keys: own block only
            if ((k - P - L) / block_size == qb) {
                m.set(q, k, true);
            }
        }
    }
    m.validate();
    return m;
}

AttnMask cache_decode_mask(int cache_len, int span) {
    if (cache_len < 0 || span < 1) {
        throw std::invalid_argument("cache_decode_mask: need cache_len >= 0, span >= 1");
    }
    AttnMask m = AttnMask::falses(span, cache_len + span);
    for (auto& v : m.allow) {
        v = 1;
    }
    return m;
}

}  // namespace blockdiff
