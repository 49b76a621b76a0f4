#include "php_session.h"

static const int expected[SESSION_DONE] = {OP_HELLO, OP_AUTH, OP_OPEN, OP_READ, OP_WRITE, OP_CLOSE};

static int php_session_step(php_session *s, int opcode)
{
    int next_state = s->state;

    #ifdef _USE_IJON
    IJON_STATE(next_state);
    #endif
    if (opcode == expected[s->state]) {
        next_state = s->state + 1;
    } else {
        next_state = 0;
    }
    s->state = next_state;

    #ifdef _USE_IJON
    IJON_STATE(s->state);
    #endif
    return next_state == SESSION_DONE;
}

PHP_FUNCTION(session_feed)
{
    zend_long op;
    ZEND_PARSE_PARAMETERS_START(1, 1)
        Z_PARAM_LONG(op)
    ZEND_PARSE_PARAMETERS_END();
    RETURN_BOOL(php_session_step(PS(current), (int) op));
}
