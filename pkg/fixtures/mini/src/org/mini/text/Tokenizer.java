package org.mini.text;

/**
 * Splits arithmetic expressions such as "max(a, 2.5) + {b}" into tokens.
 */
public class Tokenizer {

    private final String input;
    private int pos;

    public Tokenizer(String input) {
        this.input = input;
    }

    public boolean hasNext() {
        skipWhitespace();
        return pos < input.length();
    }

    public String next() {
        skipWhitespace();
        char c = input.charAt(pos);
        if (Character.isDigit(c)) {
            return readNumber();
        }
        if (Character.isLetter(c)) {
            return readIdentifier();
        }
        pos++;
        return String.valueOf(c);
    }

    private void skipWhitespace() {
        while (pos < input.length() && Character.isWhitespace(input.charAt(pos))) {
            pos++;
        }
    }

    private String readNumber() {
        int start = pos;
        while (pos < input.length() && Character.isDigit(input.charAt(pos))) {
            pos++;
        }
        return input.substring(start, pos);
    }

    private String readIdentifier() {
        int start = pos;
        while (pos < input.length() && Character.isLetterOrDigit(input.charAt(pos))) {
            pos++;
        }
        return input.substring(start, pos);
    }
}
