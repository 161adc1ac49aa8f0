#include <stdio.h>
#include <string.h>
#include "gas2s.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        return 64;
    }
    Gas2sGraph *g = NULL;
    if (gas2s_graph_load(argv[1], &g) != GAS2S_STATUS_OK) {
        char msg[256];
        gas2s_last_error_message(msg, sizeof msg);
        fprintf(stderr, "load failed: %s\n", msg);
        return 1;
    }
    size_t ents = 0, rels = 0;
    gas2s_graph_counts(g, &ents, &rels);

    Gas2sVocab *v = NULL;
    if (gas2s_vocab_train(g, 200, &v) != GAS2S_STATUS_OK) {
        return 2;
    }
    uint32_t ids[64];
    size_t len = 0;
    if (gas2s_vocab_encode(v, "hello", ids, 64, &len) != GAS2S_STATUS_OK || len == 0) {
        return 3;
    }
    char *text = NULL;
    gas2s_vocab_decode(v, ids, len, &text);
    int same = strcmp(text, "hello") == 0;
    gas2s_string_free(text);

    Gas2sGraph *missing = NULL;
    Gas2sStatus st = gas2s_graph_load("/nonexistent", &missing);
    size_t need = gas2s_last_error_message(NULL, 0);

    printf("%zu %zu %d %d %d\n", ents, rels, same, (int)st, need > 0);
    gas2s_vocab_free(v);
    gas2s_graph_free(g);
    return 0;
}
